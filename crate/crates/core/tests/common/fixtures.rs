use std::path::{Path, PathBuf};

use prismlike_core::collector::{run_session, SessionConfig, SessionSummary};
use prismlike_core::scenario;
use prismlike_core::store::MetricStore;

pub fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn trace_path(name: &str) -> PathBuf {
    root().join("traces").join(format!("{name}.ndjson"))
}

/// `PRISMLIKE_BLESS=1` rewrites committed fixtures instead of comparing.
pub fn bless() -> bool {
    std::env::var_os("PRISMLIKE_BLESS").is_some_and(|v| v == "1")
}

/// Replays the committed trace of a scenario into `dir/<name>.db3`.
pub fn replay(name: &str, dir: &Path) -> (SessionSummary, MetricStore) {
    let sc = scenario::by_name(name).unwrap();
    let db = dir.join(format!("{name}.db3"));
    let mut config = SessionConfig::replay(trace_path(name), &db);
    config.bootstrap_pids = sc.bootstrap.clone();
    let summary = run_session(&config).unwrap();
    (summary, MetricStore::open_read_only(&db).unwrap())
}
