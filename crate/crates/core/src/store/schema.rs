//! Table layout of the metric store. `ts` is always the window start in ns.

pub const TABLES: [&str; 9] = [
    "session_meta",
    "processes",
    "threads",
    "task_samples",
    "resource_waits",
    "futex_wakes",
    "epoll_file_waits",
    "device_io",
    "discovery_edges",
];

pub const DDL: &str = r#"
CREATE TABLE session_meta (
    key   TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE processes (
    tgid        INTEGER PRIMARY KEY,
    comm        TEXT NOT NULL,
    first_seen  INTEGER NOT NULL,
    parent_tgid INTEGER
);
CREATE TABLE threads (
    tid        INTEGER PRIMARY KEY,
    tgid       INTEGER NOT NULL,
    comm       TEXT NOT NULL,
    first_seen INTEGER NOT NULL
);
CREATE TABLE task_samples (
    ts             INTEGER NOT NULL,
    tgid           INTEGER NOT NULL,
    tid            INTEGER NOT NULL,
    comm           TEXT NOT NULL,
    runtime_ns     INTEGER NOT NULL,
    rq_time_ns     INTEGER NOT NULL,
    sleep_time_ns  INTEGER NOT NULL,
    block_time_ns  INTEGER NOT NULL,
    iowait_time_ns INTEGER NOT NULL,
    blkio_share    REAL NOT NULL,
    PRIMARY KEY (ts, tid)
);
CREATE TABLE resource_waits (
    ts         INTEGER NOT NULL,
    tgid       INTEGER NOT NULL,
    tid        INTEGER NOT NULL,
    res_kind   TEXT NOT NULL,
    bri_key    TEXT NOT NULL,
    wait_ns    INTEGER NOT NULL,
    wait_count INTEGER NOT NULL,
    PRIMARY KEY (ts, tid, res_kind, bri_key)
);
CREATE TABLE futex_wakes (
    ts         INTEGER NOT NULL,
    tgid       INTEGER NOT NULL,
    tid        INTEGER NOT NULL,
    bri_key    TEXT NOT NULL,
    wake_count INTEGER NOT NULL,
    PRIMARY KEY (ts, tid, bri_key)
);
CREATE TABLE epoll_file_waits (
    ts        INTEGER NOT NULL,
    epoll_key TEXT NOT NULL,
    bri_key   TEXT NOT NULL,
    wait_ns   INTEGER NOT NULL,
    PRIMARY KEY (ts, epoll_key, bri_key)
);
CREATE TABLE device_io (
    ts        INTEGER NOT NULL,
    tgid      INTEGER NOT NULL,
    tid       INTEGER NOT NULL,
    dev_major INTEGER NOT NULL,
    dev_minor INTEGER NOT NULL,
    sectors   INTEGER NOT NULL,
    PRIMARY KEY (ts, tid, dev_major, dev_minor)
);
CREATE TABLE discovery_edges (
    from_tgid  INTEGER NOT NULL,
    to_tgid    INTEGER,
    peer       TEXT NOT NULL,
    bri_key    TEXT NOT NULL,
    first_seen INTEGER NOT NULL,
    PRIMARY KEY (from_tgid, peer, bri_key)
);
CREATE VIEW taskstats_view AS
    SELECT ts, tgid, tid, comm, runtime_ns, rq_time_ns, sleep_time_ns,
           block_time_ns, iowait_time_ns, blkio_share
    FROM task_samples;
"#;

/// Column order used for exports, which is also the primary-key order.
pub fn export_query(table: &str) -> Option<&'static str> {
    Some(match table {
        "session_meta" => "SELECT key, value FROM session_meta ORDER BY key",
        "processes" => "SELECT tgid, comm, first_seen, parent_tgid FROM processes ORDER BY tgid",
        "threads" => "SELECT tid, tgid, comm, first_seen FROM threads ORDER BY tid",
        "task_samples" => "SELECT ts, tgid, tid, comm, runtime_ns, rq_time_ns, sleep_time_ns, block_time_ns, iowait_time_ns, blkio_share FROM task_samples ORDER BY ts, tid",
        "resource_waits" => "SELECT ts, tgid, tid, res_kind, bri_key, wait_ns, wait_count FROM resource_waits ORDER BY ts, tid, res_kind, bri_key",
        "futex_wakes" => "SELECT ts, tgid, tid, bri_key, wake_count FROM futex_wakes ORDER BY ts, tid, bri_key",
        "epoll_file_waits" => "SELECT ts, epoll_key, bri_key, wait_ns FROM epoll_file_waits ORDER BY ts, epoll_key, bri_key",
        "device_io" => "SELECT ts, tgid, tid, dev_major, dev_minor, sectors FROM device_io ORDER BY ts, tid, dev_major, dev_minor",
        "discovery_edges" => "SELECT from_tgid, to_tgid, peer, bri_key, first_seen FROM discovery_edges ORDER BY from_tgid, peer, bri_key",
        _ => return None,
    })
}
