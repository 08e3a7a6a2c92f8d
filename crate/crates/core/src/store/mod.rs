//! Single-file metric store.
//!
//! Metric samples, process/thread metadata and discovery edges are kept in a
//! SQLite file (conventionally `*.db3`). Writers append whole windows; the
//! analyzer, graph builder and HTTP service open the file read-only. Every
//! table can be exported as newline-delimited JSON ordered by primary key,
//! which is the format used for golden-file and cross-implementation diffs.

mod schema;
pub mod template;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rusqlite::types::ValueRef;
use rusqlite::{params, Connection, OpenFlags, OptionalExtension, Transaction};
use serde_json::Value;

pub use schema::TABLES;
pub use template::{Bindings, PlotKind, QueryResult, QueryTemplate, TemplateLibrary, TsRange};

use crate::error::StoreError;
use crate::model::{
    Bri, DiscoveryEdge, MetricKind, MetricSample, Nanos, Peer, ProcessMeta, Subject, ThreadMeta,
    ThreadRef, TimeWindow, WaitDir,
};

/// One unit of appended data.
#[derive(Debug, Clone, PartialEq)]
pub enum StoreRecord {
    Sample(MetricSample),
    Edge(DiscoveryEdge),
    Process(ProcessMeta),
    Thread(ThreadMeta),
}

pub struct MetricStore {
    conn: Connection,
    path: Option<PathBuf>,
    read_only: bool,
}

fn res_kind(metric: MetricKind, dir: Option<WaitDir>) -> Option<&'static str> {
    use MetricKind::*;
    Some(match (metric, dir) {
        (PipeWaitTime | PipeWaitCount, Some(WaitDir::Read)) => "pipe_read",
        (PipeWaitTime | PipeWaitCount, Some(WaitDir::Write)) => "pipe_write",
        (PipeWaitTime | PipeWaitCount, _) => "pipe_poll",
        (SocketWaitTime | SocketWaitCount, Some(WaitDir::Read)) => "socket_recv",
        (SocketWaitTime | SocketWaitCount, Some(WaitDir::Write)) => "socket_send",
        (SocketWaitTime | SocketWaitCount, _) => "socket_poll",
        (FutexWaitTime | FutexWaitCount, _) => "futex",
        (EpollWaitTime | EpollWaitCount, _) => "epoll",
        _ => return None,
    })
}

/// Inverse of `res_kind`: (time metric, count metric, direction).
fn metrics_of_res_kind(kind: &str) -> Option<(MetricKind, MetricKind, Option<WaitDir>)> {
    use MetricKind::*;
    Some(match kind {
        "pipe_read" => (PipeWaitTime, PipeWaitCount, Some(WaitDir::Read)),
        "pipe_write" => (PipeWaitTime, PipeWaitCount, Some(WaitDir::Write)),
        "pipe_poll" => (PipeWaitTime, PipeWaitCount, Some(WaitDir::Poll)),
        "socket_recv" => (SocketWaitTime, SocketWaitCount, Some(WaitDir::Read)),
        "socket_send" => (SocketWaitTime, SocketWaitCount, Some(WaitDir::Write)),
        "socket_poll" => (SocketWaitTime, SocketWaitCount, Some(WaitDir::Poll)),
        "futex" => (FutexWaitTime, FutexWaitCount, None),
        "epoll" => (EpollWaitTime, EpollWaitCount, None),
        _ => return None,
    })
}

fn conflict(table: &'static str, key: impl Into<String>) -> StoreError {
    StoreError::Conflict { table, key: key.into() }
}

fn map_insert(err: rusqlite::Error, table: &'static str, key: String) -> StoreError {
    match err {
        rusqlite::Error::SqliteFailure(e, _) if e.code == rusqlite::ErrorCode::ConstraintViolation => {
            conflict(table, key)
        }
        other => StoreError::Sql(other),
    }
}

#[derive(Default)]
struct WaitRow {
    tgid: u32,
    wait_ns: Option<u64>,
    wait_count: Option<u64>,
}

impl MetricStore {
    /// Creates a fresh store, replacing any file already at `path`.
    pub fn create(path: &Path) -> Result<Self, StoreError> {
        if path.exists() {
            fs::remove_file(path)?;
        }
        let conn = Connection::open(path)?;
        conn.execute_batch(schema::DDL)?;
        Ok(MetricStore { conn, path: Some(path.to_path_buf()), read_only: false })
    }

    pub fn in_memory() -> Result<Self, StoreError> {
        let conn = Connection::open_in_memory()?;
        conn.execute_batch(schema::DDL)?;
        Ok(MetricStore { conn, path: None, read_only: false })
    }

    pub fn open_read_only(path: &Path) -> Result<Self, StoreError> {
        if !path.exists() {
            return Err(StoreError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("store {} does not exist", path.display()),
            )));
        }
        let conn = Connection::open_with_flags(
            path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )?;
        Ok(MetricStore { conn, path: Some(path.to_path_buf()), read_only: true })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn is_read_only(&self) -> bool {
        self.read_only
    }

    pub(crate) fn conn(&self) -> &Connection {
        &self.conn
    }

    fn writable(&mut self) -> Result<Transaction<'_>, StoreError> {
        if self.read_only {
            return Err(StoreError::ReadOnly);
        }
        Ok(self.conn.transaction()?)
    }

    pub fn set_meta(&mut self, key: &str, value: &str) -> Result<(), StoreError> {
        let tx = self.writable()?;
        tx.execute(
            "INSERT OR REPLACE INTO session_meta (key, value) VALUES (?1, ?2)",
            params![key, value],
        )?;
        tx.commit()?;
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<Option<String>, StoreError> {
        Ok(self
            .conn
            .query_row("SELECT value FROM session_meta WHERE key = ?1", [key], |r| r.get(0))
            .optional()?)
    }

    /// Collection window length recorded for the session.
    pub fn window_ns(&self) -> Result<Option<Nanos>, StoreError> {
        Ok(self.meta("window_ns")?.and_then(|v| v.parse().ok()))
    }

    pub fn cpus(&self) -> Result<Option<u32>, StoreError> {
        Ok(self.meta("cpus")?.and_then(|v| v.parse().ok()))
    }

    /// Appends a batch atomically. Re-appending a row whose key already
    /// exists fails with `Conflict` and leaves the store unchanged.
    pub fn append(&mut self, records: &[StoreRecord]) -> Result<(), StoreError> {
        let mut task: BTreeMap<(Nanos, u32), (ThreadRef, [u64; 5])> = BTreeMap::new();
        let mut task_seen: BTreeSet<(Nanos, u32, MetricKind)> = BTreeSet::new();
        let mut waits: BTreeMap<(Nanos, u32, &'static str, String), WaitRow> = BTreeMap::new();
        let mut wakes: BTreeMap<(Nanos, u32, String), (u32, u64)> = BTreeMap::new();
        let mut file_waits: BTreeMap<(Nanos, String, String), u64> = BTreeMap::new();
        let mut devices: BTreeMap<(Nanos, u32, u32, u32), (u32, u64)> = BTreeMap::new();
        let mut others = Vec::new();

        for record in records {
            let StoreRecord::Sample(s) = record else {
                others.push(record);
                continue;
            };
            let ts = s.window.start_ns;
            let key_text = || {
                format!(
                    "ts={ts} subject={:?} metric={} resource={:?}",
                    s.subject,
                    s.metric,
                    s.resource.as_ref().map(Bri::key)
                )
            };
            match (&s.subject, s.metric) {
                (Subject::Epoll(epoll), MetricKind::EpollFileWait) => {
                    let bri = s.resource.as_ref().ok_or_else(|| StoreError::Corrupt(key_text()))?;
                    if file_waits.insert((ts, epoll.key(), bri.key()), s.value).is_some() {
                        return Err(conflict("epoll_file_waits", key_text()));
                    }
                }
                (Subject::Epoll(_), _) | (Subject::Thread(_), MetricKind::EpollFileWait) => {
                    return Err(StoreError::Corrupt(key_text()));
                }
                (Subject::Thread(t), metric) if !metric.needs_resource() => {
                    if !task_seen.insert((ts, t.tid, metric)) {
                        return Err(conflict("task_samples", key_text()));
                    }
                    let slot = MetricKind::SCHEDULER.iter().position(|m| *m == metric).unwrap();
                    task.entry((ts, t.tid)).or_insert_with(|| (t.clone(), [0; 5])).1[slot] = s.value;
                }
                (Subject::Thread(t), MetricKind::FutexWakeCount) => {
                    let bri = s.resource.as_ref().ok_or_else(|| StoreError::Corrupt(key_text()))?;
                    if wakes.insert((ts, t.tid, bri.key()), (t.tgid, s.value)).is_some() {
                        return Err(conflict("futex_wakes", key_text()));
                    }
                }
                (Subject::Thread(t), MetricKind::SectorCount) => {
                    let Some(Bri::BlockDev { major, minor }) = &s.resource else {
                        return Err(StoreError::Corrupt(key_text()));
                    };
                    if devices.insert((ts, t.tid, *major, *minor), (t.tgid, s.value)).is_some() {
                        return Err(conflict("device_io", key_text()));
                    }
                }
                (Subject::Thread(t), metric) => {
                    let kind = res_kind(metric, s.dir).ok_or_else(|| StoreError::Corrupt(key_text()))?;
                    let bri = s.resource.as_ref().ok_or_else(|| StoreError::Corrupt(key_text()))?;
                    let row = waits.entry((ts, t.tid, kind, bri.key())).or_default();
                    row.tgid = t.tgid;
                    let slot = if metric.is_time() { &mut row.wait_ns } else { &mut row.wait_count };
                    if slot.replace(s.value).is_some() {
                        return Err(conflict("resource_waits", key_text()));
                    }
                }
            }
        }

        let tx = self.writable()?;
        {
            let mut stmt = tx.prepare_cached(
                "INSERT INTO device_io (ts, tgid, tid, dev_major, dev_minor, sectors) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            )?;
            for ((ts, tid, major, minor), (tgid, sectors)) in &devices {
                stmt.execute(params![ts, tgid, tid, major, minor, sectors])
                    .map_err(|e| map_insert(e, "device_io", format!("ts={ts} tid={tid} dev={major}:{minor}")))?;
            }
        }
        {
            let mut shares: HashMap<Nanos, BTreeMap<u32, f64>> = HashMap::new();
            let mut stmt = tx.prepare_cached(
                "INSERT INTO task_samples (ts, tgid, tid, comm, runtime_ns, rq_time_ns, sleep_time_ns, block_time_ns, iowait_time_ns, blkio_share) \
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10)",
            )?;
            for ((ts, tid), (thread, v)) in &task {
                if !shares.contains_key(ts) {
                    shares.insert(*ts, blkio_shares(&tx, *ts)?);
                }
                let share = shares[ts].get(tid).copied().unwrap_or(0.0);
                // SCHEDULER order: runtime, rq, block, iowait, sleep
                stmt.execute(params![ts, thread.tgid, tid, thread.comm, v[0], v[1], v[4], v[2], v[3], share])
                    .map_err(|e| map_insert(e, "task_samples", format!("ts={ts} tid={tid}")))?;
            }
        }
        {
            let mut stmt = tx.prepare_cached(
                "INSERT INTO resource_waits (ts, tgid, tid, res_kind, bri_key, wait_ns, wait_count) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            )?;
            for ((ts, tid, kind, bri), row) in &waits {
                stmt.execute(params![ts, row.tgid, tid, kind, bri, row.wait_ns.unwrap_or(0), row.wait_count.unwrap_or(0)])
                    .map_err(|e| map_insert(e, "resource_waits", format!("ts={ts} tid={tid} {kind} {bri}")))?;
            }
        }
        {
            let mut stmt = tx.prepare_cached(
                "INSERT INTO futex_wakes (ts, tgid, tid, bri_key, wake_count) VALUES (?1, ?2, ?3, ?4, ?5)",
            )?;
            for ((ts, tid, bri), (tgid, count)) in &wakes {
                stmt.execute(params![ts, tgid, tid, bri, count])
                    .map_err(|e| map_insert(e, "futex_wakes", format!("ts={ts} tid={tid} {bri}")))?;
            }
        }
        {
            let mut stmt = tx.prepare_cached(
                "INSERT INTO epoll_file_waits (ts, epoll_key, bri_key, wait_ns) VALUES (?1, ?2, ?3, ?4)",
            )?;
            for ((ts, epoll, bri), wait) in &file_waits {
                stmt.execute(params![ts, epoll, bri, wait])
                    .map_err(|e| map_insert(e, "epoll_file_waits", format!("ts={ts} {epoll} {bri}")))?;
            }
        }
        for record in others {
            match record {
                StoreRecord::Process(p) => {
                    tx.execute(
                        "INSERT INTO processes (tgid, comm, first_seen, parent_tgid) VALUES (?1, ?2, ?3, ?4)",
                        params![p.tgid, p.comm, p.first_seen, p.parent_tgid],
                    )
                    .map_err(|e| map_insert(e, "processes", format!("tgid={}", p.tgid)))?;
                }
                StoreRecord::Thread(t) => {
                    tx.execute(
                        "INSERT INTO threads (tid, tgid, comm, first_seen) VALUES (?1, ?2, ?3, ?4)",
                        params![t.tid, t.tgid, t.comm, t.first_seen],
                    )
                    .map_err(|e| map_insert(e, "threads", format!("tid={}", t.tid)))?;
                }
                StoreRecord::Edge(e) => {
                    tx.execute(
                        "INSERT INTO discovery_edges (from_tgid, to_tgid, peer, bri_key, first_seen) VALUES (?1, ?2, ?3, ?4, ?5)",
                        params![e.from_tgid, e.to.tgid(), e.to.label(), e.via.key(), e.first_seen],
                    )
                    .map_err(|err| map_insert(err, "discovery_edges", format!("{} -> {} via {}", e.from_tgid, e.to, e.via)))?;
                }
                StoreRecord::Sample(_) => unreachable!(),
            }
        }
        tx.commit()?;
        Ok(())
    }

    /// Per-thread share of device sectors in the window starting at
    /// `window_start`: the thread's sectors over all sectors issued to the
    /// devices it used. Idle devices give no entry.
    pub fn derive_blkio_share(&self, window_start: Nanos) -> Result<BTreeMap<u32, f64>, StoreError> {
        blkio_shares(&self.conn, window_start)
    }

    pub fn processes(&self) -> Result<Vec<ProcessMeta>, StoreError> {
        let mut stmt = self
            .conn
            .prepare("SELECT tgid, comm, first_seen, parent_tgid FROM processes ORDER BY first_seen, tgid")?;
        let rows = stmt.query_map([], |r| {
            Ok(ProcessMeta {
                tgid: r.get(0)?,
                comm: r.get(1)?,
                first_seen: r.get(2)?,
                parent_tgid: r.get(3)?,
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn threads(&self) -> Result<Vec<ThreadMeta>, StoreError> {
        let mut stmt = self
            .conn
            .prepare("SELECT tid, tgid, comm, first_seen FROM threads ORDER BY first_seen, tid")?;
        let rows = stmt.query_map([], |r| {
            Ok(ThreadMeta {
                tid: r.get(0)?,
                tgid: r.get(1)?,
                comm: r.get(2)?,
                first_seen: r.get(3)?,
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn discovery_edges(&self) -> Result<Vec<DiscoveryEdge>, StoreError> {
        let mut stmt = self.conn.prepare(
            "SELECT from_tgid, peer, bri_key, first_seen FROM discovery_edges ORDER BY first_seen, from_tgid, peer, bri_key",
        )?;
        let rows = stmt.query_map([], |r| {
            Ok((r.get::<_, u32>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?, r.get::<_, u64>(3)?))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (from_tgid, peer, bri, first_seen) = row?;
            out.push(DiscoveryEdge {
                from_tgid,
                to: Peer::parse_label(&peer).ok_or_else(|| StoreError::Corrupt(peer.clone()))?,
                via: Bri::parse_key(&bri).map_err(|e| StoreError::Corrupt(e.to_string()))?,
                first_seen,
            });
        }
        Ok(out)
    }

    /// Distinct window starts that have any task or resource row.
    pub fn window_starts(&self) -> Result<Vec<Nanos>, StoreError> {
        let mut stmt = self.conn.prepare(
            "SELECT ts FROM task_samples UNION SELECT ts FROM resource_waits UNION SELECT ts FROM futex_wakes \
             UNION SELECT ts FROM epoll_file_waits UNION SELECT ts FROM device_io ORDER BY ts",
        )?;
        let rows = stmt.query_map([], |r| r.get::<_, u64>(0))?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Rebuilds metric samples from the tables.
    ///
    /// `range` keeps windows whose start lies inside it. With a tgid filter,
    /// thread rows are limited to those processes and epoll file rows to
    /// epolls those threads waited on in the range.
    pub fn load_samples(
        &self,
        range: Option<TimeWindow>,
        tgids: Option<&BTreeSet<u32>>,
    ) -> Result<Vec<MetricSample>, StoreError> {
        let window_ns = self.window_ns()?.unwrap_or(crate::model::NANOS_PER_SEC);
        let (lo, hi) = range.map(|r| (r.start_ns, r.end_ns)).unwrap_or((0, u64::MAX));
        let hi = hi.min(i64::MAX as u64);
        let keep = |tgid: u32| tgids.is_none_or(|set| set.contains(&tgid));
        let comms: HashMap<u32, String> = self.threads()?.into_iter().map(|t| (t.tid, t.comm)).collect();
        let thread_ref = |tid: u32, tgid: u32, fallback: Option<String>| {
            let comm = comms.get(&tid).cloned().or(fallback).unwrap_or_default();
            ThreadRef { tid, tgid, comm }
        };
        let window = |ts: u64| TimeWindow { start_ns: ts, end_ns: ts + window_ns };
        let parse = |key: &str| Bri::parse_key(key).map_err(|e| StoreError::Corrupt(e.to_string()));
        let mut out = Vec::new();

        let mut stmt = self.conn.prepare(
            "SELECT ts, tgid, tid, comm, runtime_ns, rq_time_ns, block_time_ns, iowait_time_ns, sleep_time_ns \
             FROM task_samples WHERE ts >= ?1 AND ts < ?2 ORDER BY ts, tid",
        )?;
        let mut rows = stmt.query(params![lo, hi])?;
        while let Some(r) = rows.next()? {
            let (ts, tgid, tid): (u64, u32, u32) = (r.get(0)?, r.get(1)?, r.get(2)?);
            if !keep(tgid) {
                continue;
            }
            let thread = thread_ref(tid, tgid, Some(r.get(3)?));
            for (i, metric) in MetricKind::SCHEDULER.iter().enumerate() {
                let value: u64 = r.get(4 + i)?;
                if value > 0 {
                    out.push(MetricSample {
                        window: window(ts),
                        subject: Subject::Thread(thread.clone()),
                        metric: *metric,
                        resource: None,
                        dir: None,
                        value,
                    });
                }
            }
        }

        let mut epolls_waited: BTreeSet<String> = BTreeSet::new();
        let mut stmt = self.conn.prepare(
            "SELECT ts, tgid, tid, res_kind, bri_key, wait_ns, wait_count FROM resource_waits \
             WHERE ts >= ?1 AND ts < ?2 ORDER BY ts, tid, res_kind, bri_key",
        )?;
        let mut rows = stmt.query(params![lo, hi])?;
        while let Some(r) = rows.next()? {
            let (ts, tgid, tid): (u64, u32, u32) = (r.get(0)?, r.get(1)?, r.get(2)?);
            if !keep(tgid) {
                continue;
            }
            let kind: String = r.get(3)?;
            let key: String = r.get(4)?;
            let (time_metric, count_metric, dir) =
                metrics_of_res_kind(&kind).ok_or_else(|| StoreError::Corrupt(kind.clone()))?;
            if kind == "epoll" {
                epolls_waited.insert(key.clone());
            }
            let bri = parse(&key)?;
            let thread = thread_ref(tid, tgid, None);
            for (metric, value) in [(time_metric, r.get::<_, u64>(5)?), (count_metric, r.get::<_, u64>(6)?)] {
                if value > 0 {
                    out.push(MetricSample {
                        window: window(ts),
                        subject: Subject::Thread(thread.clone()),
                        metric,
                        resource: Some(bri.clone()),
                        dir,
                        value,
                    });
                }
            }
        }

        let mut stmt = self.conn.prepare(
            "SELECT ts, tgid, tid, bri_key, wake_count FROM futex_wakes WHERE ts >= ?1 AND ts < ?2 ORDER BY ts, tid, bri_key",
        )?;
        let mut rows = stmt.query(params![lo, hi])?;
        while let Some(r) = rows.next()? {
            let (ts, tgid, tid): (u64, u32, u32) = (r.get(0)?, r.get(1)?, r.get(2)?);
            if !keep(tgid) {
                continue;
            }
            out.push(MetricSample {
                window: window(ts),
                subject: Subject::Thread(thread_ref(tid, tgid, None)),
                metric: MetricKind::FutexWakeCount,
                resource: Some(parse(&r.get::<_, String>(3)?)?),
                dir: None,
                value: r.get(4)?,
            });
        }

        let mut stmt = self.conn.prepare(
            "SELECT ts, tgid, tid, dev_major, dev_minor, sectors FROM device_io WHERE ts >= ?1 AND ts < ?2 ORDER BY ts, tid, dev_major, dev_minor",
        )?;
        let mut rows = stmt.query(params![lo, hi])?;
        while let Some(r) = rows.next()? {
            let (ts, tgid, tid): (u64, u32, u32) = (r.get(0)?, r.get(1)?, r.get(2)?);
            if !keep(tgid) {
                continue;
            }
            out.push(MetricSample {
                window: window(ts),
                subject: Subject::Thread(thread_ref(tid, tgid, None)),
                metric: MetricKind::SectorCount,
                resource: Some(Bri::BlockDev { major: r.get(3)?, minor: r.get(4)? }),
                dir: None,
                value: r.get(5)?,
            });
        }

        let mut stmt = self.conn.prepare(
            "SELECT ts, epoll_key, bri_key, wait_ns FROM epoll_file_waits WHERE ts >= ?1 AND ts < ?2 ORDER BY ts, epoll_key, bri_key",
        )?;
        let mut rows = stmt.query(params![lo, hi])?;
        while let Some(r) = rows.next()? {
            let epoll_key: String = r.get(1)?;
            if tgids.is_some() && !epolls_waited.contains(&epoll_key) {
                continue;
            }
            out.push(MetricSample {
                window: window(r.get(0)?),
                subject: Subject::Epoll(parse(&epoll_key)?),
                metric: MetricKind::EpollFileWait,
                resource: Some(parse(&r.get::<_, String>(2)?)?),
                dir: None,
                value: r.get(3)?,
            });
        }
        Ok(out)
    }

    /// Rows of one table as newline-delimited JSON, ordered by primary key.
    pub fn export_table(&self, table: &str) -> Result<String, StoreError> {
        let sql = schema::export_query(table).ok_or_else(|| StoreError::UnknownTable(table.to_string()))?;
        let result = run_query(&self.conn, sql)?;
        let mut out = String::new();
        for row in result.rows {
            let obj: serde_json::Map<String, Value> = result.columns.iter().cloned().zip(row).collect();
            out.push_str(&serde_json::to_string(&Value::Object(obj)).expect("row serializes"));
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `<table>.ndjson` for every table into `dir`.
    pub fn export_all(&self, dir: &Path) -> Result<(), StoreError> {
        fs::create_dir_all(dir)?;
        for table in TABLES {
            fs::write(dir.join(format!("{table}.ndjson")), self.export_table(table)?)?;
        }
        Ok(())
    }

    pub fn row_count(&self, table: &str) -> Result<u64, StoreError> {
        if !TABLES.contains(&table) {
            return Err(StoreError::UnknownTable(table.to_string()));
        }
        Ok(self.conn.query_row(&format!("SELECT COUNT(*) FROM {table}"), [], |r| r.get(0))?)
    }
}

fn blkio_shares(conn: &Connection, ts: Nanos) -> Result<BTreeMap<u32, f64>, StoreError> {
    let mut stmt = conn.prepare_cached(
        "SELECT tid, dev_major, dev_minor, sectors FROM device_io WHERE ts = ?1 ORDER BY tid, dev_major, dev_minor",
    )?;
    let rows: Vec<(u32, u32, u32, u64)> = stmt
        .query_map([ts], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)))?
        .collect::<Result<_, _>>()?;
    let mut device_total: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (_, major, minor, sectors) in &rows {
        *device_total.entry((*major, *minor)).or_insert(0) += sectors;
    }
    let mut per_thread: BTreeMap<u32, (u64, BTreeSet<(u32, u32)>)> = BTreeMap::new();
    for (tid, major, minor, sectors) in &rows {
        let entry = per_thread.entry(*tid).or_default();
        entry.0 += sectors;
        entry.1.insert((*major, *minor));
    }
    Ok(per_thread
        .into_iter()
        .map(|(tid, (mine, devs))| {
            let total: u64 = devs.iter().map(|d| device_total[d]).sum();
            (tid, if total == 0 { 0.0 } else { mine as f64 / total as f64 })
        })
        .collect())
}

pub(crate) fn run_query(conn: &Connection, sql: &str) -> Result<QueryResult, StoreError> {
    let mut stmt = conn.prepare(sql)?;
    if !stmt.readonly() {
        return Err(StoreError::ReadOnly);
    }
    let columns: Vec<String> = stmt.column_names().into_iter().map(str::to_string).collect();
    let n = columns.len();
    let mut rows = stmt.query([])?;
    let mut out = Vec::new();
    while let Some(r) = rows.next()? {
        let mut row = Vec::with_capacity(n);
        for i in 0..n {
            row.push(match r.get_ref(i)? {
                ValueRef::Null => Value::Null,
                ValueRef::Integer(v) => Value::from(v),
                ValueRef::Real(v) => serde_json::Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null),
                ValueRef::Text(t) => Value::String(String::from_utf8_lossy(t).into_owned()),
                ValueRef::Blob(b) => Value::String(b.iter().map(|x| format!("{x:02x}")).collect()),
            });
        }
        out.push(row);
    }
    Ok(QueryResult { columns, rows: out, plot: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bri_of_file, NANOS_PER_SEC};

    fn w(i: u64) -> TimeWindow {
        TimeWindow { start_ns: i * NANOS_PER_SEC, end_ns: (i + 1) * NANOS_PER_SEC }
    }

    fn thread(tid: u32) -> ThreadRef {
        ThreadRef::new(tid, 50, format!("t{tid}"))
    }

    fn sample(i: u64, tid: u32, metric: MetricKind, resource: Option<Bri>, dir: Option<WaitDir>, value: u64) -> StoreRecord {
        StoreRecord::Sample(MetricSample { window: w(i), subject: Subject::Thread(thread(tid)), metric, resource, dir, value })
    }

    #[test]
    fn append_and_read_back() {
        let mut store = MetricStore::in_memory().unwrap();
        let p = bri_of_file(12, 7);
        store
            .append(&[
                sample(0, 1, MetricKind::Runtime, None, None, 5_000_000),
                sample(0, 1, MetricKind::PipeWaitTime, Some(p.clone()), Some(WaitDir::Read), 100),
                sample(0, 1, MetricKind::PipeWaitCount, Some(p.clone()), Some(WaitDir::Read), 2),
            ])
            .unwrap();
        let back = store.load_samples(None, None).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(store.row_count("task_samples").unwrap(), 1);
        assert_eq!(store.row_count("resource_waits").unwrap(), 1);
    }

    #[test]
    fn duplicate_key_conflicts() {
        let mut store = MetricStore::in_memory().unwrap();
        let rec = sample(0, 1, MetricKind::FutexWakeCount, Some(Bri::futex(50, 8, false)), None, 1);
        store.append(std::slice::from_ref(&rec)).unwrap();
        assert!(matches!(store.append(&[rec]), Err(StoreError::Conflict { table: "futex_wakes", .. })));
        let twice = sample(1, 1, MetricKind::Runtime, None, None, 1);
        assert!(matches!(store.append(&[twice.clone(), twice]), Err(StoreError::Conflict { .. })));
        // a failed append leaves nothing behind
        assert_eq!(store.row_count("task_samples").unwrap(), 0);
    }

    #[test]
    fn blkio_share_is_a_ratio_of_device_sectors() {
        let mut store = MetricStore::in_memory().unwrap();
        let dev = Bri::BlockDev { major: 259, minor: 1 };
        store
            .append(&[
                sample(0, 1, MetricKind::SectorCount, Some(dev.clone()), None, 300),
                sample(0, 2, MetricKind::SectorCount, Some(dev.clone()), None, 700),
                sample(0, 1, MetricKind::BlockTime, None, None, 10),
                sample(1, 3, MetricKind::SectorCount, Some(dev.clone()), None, 40),
            ])
            .unwrap();
        let shares = store.derive_blkio_share(0).unwrap();
        assert!((shares[&1] - 0.30).abs() < 1e-12);
        assert!((shares[&2] - 0.70).abs() < 1e-12);
        assert_eq!(store.derive_blkio_share(NANOS_PER_SEC).unwrap()[&3], 1.0);
        assert!(store.derive_blkio_share(5 * NANOS_PER_SEC).unwrap().is_empty());
        let row = store.export_table("task_samples").unwrap();
        assert!(row.contains("\"blkio_share\":0.3"), "{row}");
    }

    #[test]
    fn read_only_store_rejects_writes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.db3");
        MetricStore::create(&path).unwrap();
        let mut ro = MetricStore::open_read_only(&path).unwrap();
        assert!(matches!(ro.append(&[]), Err(StoreError::ReadOnly)));
    }

    #[test]
    fn export_is_ordered_ndjson() {
        let mut store = MetricStore::in_memory().unwrap();
        store.append(&[sample(2, 9, MetricKind::Runtime, None, None, 1), sample(1, 9, MetricKind::Runtime, None, None, 2)]).unwrap();
        let text = store.export_table("task_samples").unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("\"ts\":1000000000"));
    }
}
