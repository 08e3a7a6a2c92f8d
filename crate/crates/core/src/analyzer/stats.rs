//! Two-sample shift statistics.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::AnalyzerError;

/// Fewest samples per side for a test to be meaningful.
pub const MIN_SAMPLES: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.01;
pub const MIN_EFFECT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftTest {
    Mwu,
    Ks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increase,
    Decrease,
    Unchanged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    /// The test with the smaller p-value.
    pub test: ShiftTest,
    pub p_value: f64,
    pub mwu_u: f64,
    pub mwu_p: f64,
    pub ks_d: f64,
    pub ks_p: f64,
    pub wasserstein: f64,
    pub cohens_d: f64,
    pub direction: Direction,
    pub n_baseline: usize,
    pub n_compare: usize,
    pub baseline_mean: f64,
    pub compare_mean: f64,
}

impl ShiftReport {
    pub fn is_shift(&self, alpha: f64) -> bool {
        self.p_value < alpha && self.cohens_d.abs() >= MIN_EFFECT
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Mann-Whitney U of `a` against `b` with a two-sided p-value from the
/// tie-corrected normal approximation (with continuity correction).
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, bool)> = a.iter().map(|v| (*v, true)).chain(b.iter().map(|v| (*v, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_sum_a += all[i..=j].iter().filter(|(_, from_a)| *from_a).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
    let nt = n as f64;
    let var = n1 * n2 / 12.0 * ((nt + 1.0) - tie_term / (nt * (nt - 1.0)));
    if var <= 0.0 {
        return (u, 1.0);
    }
    let z = ((u - n1 * n2 / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    (u, (2.0 * normal_sf(z)).clamp(0.0, 1.0))
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // complementary series, fast for small arguments
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let mut cdf = 0.0;
        for j in 1..=50 {
            let k = (2 * j - 1) as f64;
            let term = (-k * k * pi2 / (8.0 * lambda * lambda)).exp();
            cdf += term;
            if term < 1e-17 {
                break;
            }
        }
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda * cdf;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value with the
/// small-sample correction `(sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) * D`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (sa, sb) = (sorted(a), sorted(b));
    let (n1, n2) = (sa.len(), sb.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n1 && j < n2 {
        let x = sa[i].min(sb[j]);
        while i < n1 && sa[i] <= x {
            i += 1;
        }
        while j < n2 && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n1 as f64 - j as f64 / n2 as f64).abs());
    }
    let en = ((n1 * n2) as f64 / (n1 + n2) as f64).sqrt();
    (d, kolmogorov_sf((en + 0.12 + 0.11 / en) * d))
}

/// First Wasserstein distance between the two empirical distributions.
pub fn wasserstein(a: &[f64], b: &[f64]) -> f64 {
    let (sa, sb) = (sorted(a), sorted(b));
    let mut points: Vec<f64> = sa.iter().chain(sb.iter()).copied().collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let cdf = |s: &[f64], x: f64| s.partition_point(|v| *v <= x) as f64 / s.len() as f64;
    points
        .windows(2)
        .map(|w| (cdf(&sa, w[0]) - cdf(&sb, w[0])).abs() * (w[1] - w[0]))
        .sum()
}

/// Standardized mean difference (compare minus baseline) with pooled
/// standard deviation. Constant but different samples give `±f64::MAX`.
pub fn cohens_d(baseline: &[f64], compare: &[f64]) -> f64 {
    let (n1, n2) = (baseline.len() as f64, compare.len() as f64);
    let diff = mean(compare) - mean(baseline);
    let pooled = (((n1 - 1.0) * variance(baseline) + (n2 - 1.0) * variance(compare)) / (n1 + n2 - 2.0)).sqrt();
    if pooled > 0.0 {
        diff / pooled
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::MAX
    }
}

/// All statistics for one baseline/compare pair.
pub fn shift_report(baseline: &[f64], compare: &[f64]) -> Result<ShiftReport, AnalyzerError> {
    if baseline.len() < MIN_SAMPLES || compare.len() < MIN_SAMPLES {
        return Err(AnalyzerError::NotEnoughData { baseline: baseline.len(), compare: compare.len(), min: MIN_SAMPLES });
    }
    let (mwu_u, mwu_p) = mann_whitney_u(baseline, compare);
    let (ks_d, ks_p) = ks_two_sample(baseline, compare);
    let (test, p_value) = if ks_p < mwu_p { (ShiftTest::Ks, ks_p) } else { (ShiftTest::Mwu, mwu_p) };
    let (bm, cm) = (mean(baseline), mean(compare));
    Ok(ShiftReport {
        test,
        p_value,
        mwu_u,
        mwu_p,
        ks_d,
        ks_p,
        wasserstein: wasserstein(baseline, compare),
        cohens_d: cohens_d(baseline, compare),
        direction: if cm > bm {
            Direction::Increase
        } else if cm < bm {
            Direction::Decrease
        } else {
            Direction::Unchanged
        },
        n_baseline: baseline.len(),
        n_compare: compare.len(),
        baseline_mean: bm,
        compare_mean: cm,
    })
}

/// A report when the distributions shift (`min(p) < alpha` and
/// `|d| >= 0.5`), `None` when they do not.
pub fn distribution_shift(baseline: &[f64], compare: &[f64], alpha: f64) -> Result<Option<ShiftReport>, AnalyzerError> {
    let report = shift_report(baseline, compare)?;
    Ok(report.is_shift(alpha).then_some(report))
}
