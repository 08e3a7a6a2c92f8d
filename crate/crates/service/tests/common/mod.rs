#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prismlike_core::scenario;
use prismlike_core::store::MetricStore;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn trace(name: &str) -> PathBuf {
    fixtures().join("traces").join(format!("{name}.ndjson"))
}

/// Replays a scenario into `<dir>/<name>.db`.
pub fn store_file(name: &str, dir: &Path) -> PathBuf {
    let path = dir.join(format!("{name}.db"));
    let sc = scenario::by_name(name).unwrap();
    sc.replay_into(MetricStore::create(&path).unwrap()).unwrap();
    path
}

pub fn prismlike(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prismlike"))
        .args(args)
        .env_remove("PRISMLIKE_DB")
        .env_remove("PRISMLIKE_LOADER")
        .output()
        .expect("run prismlike")
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}
