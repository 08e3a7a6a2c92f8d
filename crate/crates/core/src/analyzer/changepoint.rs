//! Locating a mean shift in a series, to suggest baseline and compare ranges.

use serde::Serialize;

use crate::model::Nanos;
use crate::store::TsRange;

use super::KpiSeries;

/// Fewest points on each side of a candidate split.
const MIN_SIDE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChangePoint {
    /// Timestamp of the first point after the shift.
    pub ts_ns: Nanos,
    pub index: usize,
    /// Welch t statistic of the split.
    pub t_stat: f64,
    pub before_mean: f64,
    pub after_mean: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// The split of `points` that maximizes the Welch t statistic between the
/// two sides. `points` must be sorted by timestamp.
pub fn mean_shift(points: &[(Nanos, f64)]) -> Option<ChangePoint> {
    let values: Vec<f64> = points.iter().map(|p| p.1).collect();
    let mut best: Option<ChangePoint> = None;
    for k in MIN_SIDE..=values.len().saturating_sub(MIN_SIDE) {
        let (a, b) = values.split_at(k);
        let ((ma, va), (mb, vb)) = (mean_var(a), mean_var(b));
        let se = (va / a.len() as f64 + vb / b.len() as f64).sqrt();
        let t = if se > 0.0 {
            (mb - ma).abs() / se
        } else if ma != mb {
            f64::INFINITY
        } else {
            0.0
        };
        if best.is_none_or(|c| t > c.t_stat) {
            best = Some(ChangePoint { ts_ns: points[k].0, index: k, t_stat: t, before_mean: ma, after_mean: mb });
        }
    }
    best.filter(|c| c.t_stat > 0.0)
}

/// Baseline and compare ranges on either side of the largest KPI shift,
/// aligned to whole windows.
pub fn suggest_ranges(kpi: &KpiSeries, window_ns: Nanos) -> Option<(TsRange, TsRange, ChangePoint)> {
    let series = kpi.per_window(window_ns);
    let cp = mean_shift(&series)?;
    let start = series.first()?.0;
    let end = series.last()?.0 + window_ns;
    let baseline = TsRange::new(start, cp.ts_ns).ok()?;
    let compare = TsRange::new(cp.ts_ns, end).ok()?;
    Some((baseline, compare, cp))
}
