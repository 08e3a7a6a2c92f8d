use std::path::PathBuf;

use thiserror::Error;

use crate::model::Nanos;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("unsupported socket family `{0}`")]
    UnsupportedFamily(String),
    #[error("malformed endpoint `{0}`")]
    MalformedEndpoint(String),
    #[error("malformed resource key `{0}`")]
    BadBriKey(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("empty time window [{start_ns}, {end_ns})")]
    EmptyWindow { start_ns: Nanos, end_ns: Nanos },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("event at {ts} ns precedes previous event at {last} ns")]
    OrderViolation { ts: Nanos, last: Nanos },
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading trace {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate row in {table}: {key}")]
    Conflict { table: &'static str, key: String },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("invalid binding `{name}`: {reason}")]
    InvalidBinding { name: String, reason: String },
    #[error("store is read-only")]
    ReadOnly,
    #[error("corrupt store row: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Sql(#[from] rusqlite::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("not enough samples (baseline {baseline}, compare {compare}; need at least {min} each)")]
    NotEnoughData {
        baseline: usize,
        compare: usize,
        min: usize,
    },
    #[error("resource {0} is not a futex, pipe or socket")]
    NotAnIpcResource(String),
    #[error("invalid KPI series: {0}")]
    InvalidKpi(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad stream magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("record layout version {found}, collector expects {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated record")]
    Truncated,
    #[error("unknown {what} tag {value}")]
    BadTag { what: &'static str, value: u64 },
    #[error("invalid record: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum CollectorError {
    #[error("invalid session config: {0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("probe load failed: {0}")]
    ProbeLoad(String),
    #[error("insufficient privileges: {0}")]
    Privilege(String),
    #[error("live stream: {0}")]
    Stream(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
