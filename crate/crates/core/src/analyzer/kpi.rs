//! Application-level KPI series, such as latency or throughput samples.

use serde::{Deserialize, Serialize};

use crate::error::AnalyzerError;
use crate::model::{Nanos, NANOS_PER_SEC};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpiPoint {
    pub ts_ns: Nanos,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KpiSeries {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    /// Added to every point to move it onto the store's clock.
    #[serde(default)]
    pub offset_ns: i64,
    pub points: Vec<KpiPoint>,
}

impl KpiSeries {
    /// Parses `ts,value` lines with `ts` in seconds. A non-numeric first
    /// line is taken as a header; blank lines and `#` comments are skipped.
    pub fn from_csv(name: &str, text: &str) -> Result<Self, AnalyzerError> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || AnalyzerError::InvalidKpi(format!("line {}: expected `seconds,value`, got {line:?}", i + 1));
            let (ts, value) = line.split_once(',').ok_or_else(bad)?;
            let (ts, value) = match (ts.trim().parse::<f64>(), value.trim().parse::<f64>()) {
                (Ok(t), Ok(v)) => (t, v),
                _ if points.is_empty() && i == 0 => continue,
                _ => return Err(bad()),
            };
            if !(ts.is_finite() && ts >= 0.0 && value.is_finite()) {
                return Err(bad());
            }
            points.push(KpiPoint { ts_ns: (ts * NANOS_PER_SEC as f64).round() as Nanos, value });
        }
        let mut series = KpiSeries { name: name.to_string(), points, ..KpiSeries::default() };
        series.normalize();
        Ok(series)
    }

    pub fn from_json(text: &str) -> Result<Self, AnalyzerError> {
        let mut series: KpiSeries =
            serde_json::from_str(text).map_err(|e| AnalyzerError::InvalidKpi(e.to_string()))?;
        if series.points.iter().any(|p| !p.value.is_finite()) {
            return Err(AnalyzerError::InvalidKpi("non-finite value".into()));
        }
        series.normalize();
        Ok(series)
    }

    fn normalize(&mut self) {
        self.points.sort_by_key(|p| p.ts_ns);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Point timestamps on the store's clock. Points moved before zero are dropped.
    pub fn aligned(&self) -> impl Iterator<Item = KpiPoint> + '_ {
        self.points.iter().filter_map(|p| {
            let ts = p.ts_ns.checked_add_signed(self.offset_ns)?;
            Some(KpiPoint { ts_ns: ts, value: p.value })
        })
    }

    /// Averages the aligned points of each window, for windows that have any.
    pub fn per_window(&self, window_ns: Nanos) -> Vec<(Nanos, f64)> {
        let mut out: Vec<(Nanos, f64, usize)> = Vec::new();
        for p in self.aligned() {
            let w = p.ts_ns / window_ns * window_ns;
            match out.last_mut() {
                Some((last, sum, n)) if *last == w => {
                    *sum += p.value;
                    *n += 1;
                }
                _ => out.push((w, p.value, 1)),
            }
        }
        out.into_iter().map(|(w, sum, n)| (w, sum / n as f64)).collect()
    }
}
