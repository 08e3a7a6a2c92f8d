//! Named SQL templates with validated `{{placeholder}}` substitution.
//!
//! Placeholders:
//! - `pid_filter`: a list of tgids. Absent means every process.
//! - `baseline_filter`, `compare_filter`: a time range, either
//!   `{"start_ns": a, "end_ns": b}` or a string `"t0..t1"` in seconds.
//! - `bri_filter`: a single resource key. Absent means every resource.
//!
//! Each placeholder renders to a parenthesised predicate built from parsed
//! values only, so no caller text is spliced into the SQL.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{run_query, MetricStore};
use crate::error::StoreError;
use crate::model::{Bri, Nanos, TimeWindow, NANOS_PER_SEC};

const BUILTIN: [&str; 8] = [
    include_str!("../../sql/blkio_distribution.sql"),
    include_str!("../../sql/runqueue_share.sql"),
    include_str!("../../sql/thread_sched_stack.sql"),
    include_str!("../../sql/futex_wait_by_thread.sql"),
    include_str!("../../sql/socket_wait_peer.sql"),
    include_str!("../../sql/epoll_wait_share.sql"),
    include_str!("../../sql/resource_wait_distribution.sql"),
    include_str!("../../sql/block_time_distribution.sql"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotKind {
    Line,
    Histogram,
    Bar,
}

impl PlotKind {
    fn parse(text: &str) -> Option<PlotKind> {
        match text {
            "line" => Some(PlotKind::Line),
            "histogram" => Some(PlotKind::Histogram),
            "bar" => Some(PlotKind::Bar),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueryTemplate {
    pub name: String,
    pub description: String,
    pub plot: PlotKind,
    pub columns: Vec<String>,
    pub text: String,
}

impl QueryTemplate {
    /// Parses a template file. The header is a run of `-- key: value`
    /// comment lines; `name` and `plot` are required.
    pub fn parse(source: &str) -> Result<QueryTemplate, StoreError> {
        let mut header = BTreeMap::new();
        for line in source.lines() {
            let Some(rest) = line.trim().strip_prefix("--") else { break };
            if let Some((k, v)) = rest.split_once(':') {
                header.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let bad = |what: &str| StoreError::InvalidBinding {
            name: "template".into(),
            reason: format!("{what} in template header"),
        };
        let name = header.remove("name").ok_or_else(|| bad("missing name"))?;
        let plot = header
            .get("plot")
            .and_then(|p| PlotKind::parse(p))
            .ok_or_else(|| bad("missing or unknown plot"))?;
        let columns = header
            .get("columns")
            .map(|c| c.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default();
        let text = source.lines().filter(|l| !l.trim_start().starts_with("--")).collect::<Vec<_>>().join("\n");
        Ok(QueryTemplate {
            name,
            description: header.remove("description").unwrap_or_default(),
            plot,
            columns,
            text,
        })
    }

    /// Placeholder names in order of first use.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for piece in Segments::new(&self.text) {
            if let Segment::Hole(name) = piece {
                if !out.iter().any(|n| n == name) {
                    out.push(name.to_string());
                }
            }
        }
        out
    }

    pub fn render(&self, bindings: &Bindings) -> Result<String, StoreError> {
        let mut sql = String::with_capacity(self.text.len());
        for piece in Segments::new(&self.text) {
            match piece {
                Segment::Text(t) => sql.push_str(t),
                Segment::Hole(name) => sql.push_str(&bindings.predicate(name)?),
            }
        }
        Ok(sql)
    }
}

enum Segment<'a> {
    Text(&'a str),
    Hole(&'a str),
}

struct Segments<'a> {
    rest: &'a str,
}

impl<'a> Segments<'a> {
    fn new(text: &'a str) -> Self {
        Segments { rest: text }
    }
}

impl<'a> Iterator for Segments<'a> {
    type Item = Segment<'a>;

    fn next(&mut self) -> Option<Segment<'a>> {
        if self.rest.is_empty() {
            return None;
        }
        match self.rest.find("{{") {
            Some(0) => {
                let Some(end) = self.rest.find("}}") else {
                    let t = self.rest;
                    self.rest = "";
                    return Some(Segment::Text(t));
                };
                let name = self.rest[2..end].trim();
                self.rest = &self.rest[end + 2..];
                Some(Segment::Hole(name))
            }
            Some(i) => {
                let t = &self.rest[..i];
                self.rest = &self.rest[i..];
                Some(Segment::Text(t))
            }
            None => {
                let t = self.rest;
                self.rest = "";
                Some(Segment::Text(t))
            }
        }
    }
}

/// Time range binding. Accepts `{"start_ns", "end_ns"}` or `"t0..t1"` in
/// seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RangeRepr", into = "RangeRepr")]
pub struct TsRange {
    pub start_ns: Nanos,
    pub end_ns: Nanos,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RangeRepr {
    Nanos { start_ns: Nanos, end_ns: Nanos },
    Seconds(String),
}

impl TryFrom<RangeRepr> for TsRange {
    type Error = String;

    fn try_from(repr: RangeRepr) -> Result<Self, String> {
        match repr {
            RangeRepr::Nanos { start_ns, end_ns } => TsRange::new(start_ns, end_ns),
            RangeRepr::Seconds(text) => text.parse(),
        }
    }
}

impl From<TsRange> for RangeRepr {
    fn from(r: TsRange) -> Self {
        RangeRepr::Nanos { start_ns: r.start_ns, end_ns: r.end_ns }
    }
}

impl TsRange {
    pub fn new(start_ns: Nanos, end_ns: Nanos) -> Result<TsRange, String> {
        if end_ns <= start_ns {
            return Err(format!("empty range {start_ns}..{end_ns}"));
        }
        if end_ns > i64::MAX as u64 {
            return Err(format!("range end {end_ns} out of bounds"));
        }
        Ok(TsRange { start_ns, end_ns })
    }

    pub fn window(&self) -> TimeWindow {
        TimeWindow { start_ns: self.start_ns, end_ns: self.end_ns }
    }
}

impl std::str::FromStr for TsRange {
    type Err = String;

    fn from_str(text: &str) -> Result<Self, String> {
        let (a, b) = text.split_once("..").ok_or_else(|| format!("expected `t0..t1`, got `{text}`"))?;
        let secs = |s: &str| -> Result<Nanos, String> {
            let v: f64 = s.trim().parse().map_err(|_| format!("bad seconds value `{s}`"))?;
            if !v.is_finite() || !(0.0..=9.0e9).contains(&v) {
                return Err(format!("seconds value `{s}` out of range"));
            }
            Ok((v * NANOS_PER_SEC as f64).round() as Nanos)
        };
        TsRange::new(secs(a)?, secs(b)?)
    }
}

impl fmt::Display for TsRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |ns: Nanos| ns as f64 / NANOS_PER_SEC as f64;
        write!(f, "{}..{}", s(self.start_ns), s(self.end_ns))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bindings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pid_filter: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_filter: Option<TsRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_filter: Option<TsRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bri_filter: Option<String>,
}

impl Bindings {
    pub fn ranges(baseline: TsRange, compare: TsRange) -> Bindings {
        Bindings { baseline_filter: Some(baseline), compare_filter: Some(compare), ..Bindings::default() }
    }

    /// Parses and validates a JSON bindings object.
    pub fn from_json(value: &Value) -> Result<Bindings, StoreError> {
        serde_json::from_value(value.clone()).map_err(|e| StoreError::InvalidBinding {
            name: "bindings".into(),
            reason: e.to_string(),
        })
    }

    fn predicate(&self, name: &str) -> Result<String, StoreError> {
        let missing = || StoreError::InvalidBinding { name: name.to_string(), reason: "required by template".into() };
        match name {
            "pid_filter" => Ok(match &self.pid_filter {
                None => "(1 = 1)".to_string(),
                Some(pids) if pids.is_empty() => "(0 = 1)".to_string(),
                Some(pids) => {
                    let list: Vec<String> = pids.iter().map(u32::to_string).collect();
                    format!("(tgid IN ({}))", list.join(", "))
                }
            }),
            "baseline_filter" | "compare_filter" => {
                let range = if name == "baseline_filter" { self.baseline_filter } else { self.compare_filter };
                let r = range.ok_or_else(missing)?;
                Ok(format!("(ts >= {} AND ts < {})", r.start_ns, r.end_ns))
            }
            "bri_filter" => match &self.bri_filter {
                None => Ok("(1 = 1)".to_string()),
                Some(key) => {
                    let bri = Bri::parse_key(key).map_err(|e| StoreError::InvalidBinding {
                        name: name.to_string(),
                        reason: e.to_string(),
                    })?;
                    Ok(format!("(bri_key = '{}')", bri.key().replace('\'', "''")))
                }
            },
            other => Err(StoreError::InvalidBinding {
                name: other.to_string(),
                reason: "unknown placeholder".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plot: Option<PlotKind>,
}

impl QueryResult {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone)]
pub struct TemplateLibrary {
    templates: BTreeMap<String, QueryTemplate>,
}

impl Default for TemplateLibrary {
    fn default() -> Self {
        TemplateLibrary::builtin()
    }
}

impl TemplateLibrary {
    pub fn builtin() -> TemplateLibrary {
        let templates = BUILTIN
            .iter()
            .map(|src| QueryTemplate::parse(src).expect("builtin template parses"))
            .map(|t| (t.name.clone(), t))
            .collect();
        TemplateLibrary { templates }
    }

    /// Adds every `*.sql` file in `dir`, replacing builtins of the same name.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize, StoreError> {
        let mut added = 0;
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "sql"))
            .collect();
        paths.sort();
        for path in paths {
            let t = QueryTemplate::parse(&fs::read_to_string(&path)?)?;
            self.templates.insert(t.name.clone(), t);
            added += 1;
        }
        Ok(added)
    }

    pub fn get(&self, name: &str) -> Result<&QueryTemplate, StoreError> {
        self.templates.get(name).ok_or_else(|| StoreError::UnknownTemplate(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueryTemplate> {
        self.templates.values()
    }
}

impl MetricStore {
    /// Runs a named template with validated bindings.
    pub fn query(&self, library: &TemplateLibrary, name: &str, bindings: &Bindings) -> Result<QueryResult, StoreError> {
        let template = library.get(name)?;
        let sql = template.render(bindings)?;
        let mut result = run_query(self.conn(), &sql)?;
        result.plot = Some(template.plot);
        Ok(result)
    }

    /// Runs arbitrary read-only SQL. Statements that would write are refused.
    pub fn raw_query(&self, sql: &str) -> Result<QueryResult, StoreError> {
        run_query(self.conn(), sql)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_library_parses() {
        let lib = TemplateLibrary::builtin();
        assert_eq!(lib.iter().count(), 8);
        let t = lib.get("blkio_distribution").unwrap();
        assert_eq!(t.plot, PlotKind::Histogram);
        assert_eq!(t.columns, ["ts", "value", "label"]);
        assert_eq!(t.placeholders(), ["pid_filter", "baseline_filter", "compare_filter"]);
        assert!(matches!(lib.get("nope"), Err(StoreError::UnknownTemplate(_))));
    }

    #[test]
    fn placeholders_tolerate_spaces() {
        let t = QueryTemplate::parse("-- name: x\n-- plot: bar\nSELECT 1 WHERE {{pid_filter}} AND {{  pid_filter }}").unwrap();
        let sql = t.render(&Bindings { pid_filter: Some(vec![3, 4]), ..Default::default() }).unwrap();
        assert_eq!(sql, "SELECT 1 WHERE (tgid IN (3, 4)) AND (tgid IN (3, 4))");
    }

    #[test]
    fn ranges_parse_both_forms() {
        let a: TsRange = serde_json::from_str(r#""0..20""#).unwrap();
        let b: TsRange = serde_json::from_str(r#"{"start_ns":0,"end_ns":20000000000}"#).unwrap();
        assert_eq!(a, b);
        assert!(serde_json::from_str::<TsRange>(r#""5..5""#).is_err());
        assert!(serde_json::from_str::<TsRange>(r#""x..y""#).is_err());
        assert_eq!("0.5..1".parse::<TsRange>().unwrap().start_ns, 500_000_000);
    }

    #[test]
    fn invalid_bindings_are_rejected() {
        let lib = TemplateLibrary::builtin();
        let t = lib.get("blkio_distribution").unwrap();
        let err = t.render(&Bindings::default()).unwrap_err();
        assert!(matches!(err, StoreError::InvalidBinding { ref name, .. } if name == "baseline_filter"));
        let bad = Bindings::from_json(&serde_json::json!({"pid_filter": "1 OR 1=1"}));
        assert!(matches!(bad, Err(StoreError::InvalidBinding { .. })));
        let bad = Bindings::from_json(&serde_json::json!({"bri_filter": "vfs:1'; DROP TABLE x"}));
        let b = bad.unwrap();
        assert!(matches!(b.predicate("bri_filter"), Err(StoreError::InvalidBinding { .. })));
        assert!(Bindings::from_json(&serde_json::json!({"other": 1})).is_err());
    }

    #[test]
    fn raw_query_refuses_writes() {
        let store = MetricStore::in_memory().unwrap();
        assert!(matches!(store.raw_query("DELETE FROM processes"), Err(StoreError::ReadOnly)));
        assert!(store.raw_query("SELECT COUNT(*) FROM processes").is_ok());
    }
}
