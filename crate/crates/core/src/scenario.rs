//! Synthetic workloads that reproduce known contention patterns.
//!
//! Every scenario runs ten one-second windows of normal behaviour followed
//! by ten degraded ones. Quantities that do not degrade repeat exactly the
//! same per-window jitter in both halves, so only the intended series shift.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    bri_of_file, Bri, Endpoint, EpollAction, EventKind, FileKind, FutexOp, IoDir, KernelEvent, Nanos, NextState,
    SockDir, SocketFamily, ThreadRef, NANOS_PER_SEC,
};
use crate::collector::{replay_trace, SessionSummary, DEFAULT_MAX_BRIS_PER_THREAD};
use crate::error::CollectorError;
use crate::store::{MetricStore, TsRange};
use crate::trace::Trace;

const S: Nanos = NANOS_PER_SEC;
const MS: Nanos = 1_000_000;
const US: Nanos = 1_000;

/// Windows per phase.
pub const PHASE: u64 = 10;

pub const NAMES: [&str; 5] = ["lock", "mysql", "chain", "kafka", "teastore"];

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub description: &'static str,
    pub trace: Trace,
    pub bootstrap: Vec<u32>,
    pub baseline: TsRange,
    pub compare: TsRange,
    /// Display name (`t4`, `f1`, ...) of the threads that matter.
    pub threads: BTreeMap<&'static str, u32>,
    pub resources: BTreeMap<&'static str, Bri>,
}

impl Scenario {
    pub fn tid(&self, name: &str) -> u32 {
        self.threads[name]
    }

    pub fn resource(&self, name: &str) -> &Bri {
        &self.resources[name]
    }

    /// Replays the trace into `store` with one-second windows.
    pub fn replay_into(&self, store: MetricStore) -> Result<(SessionSummary, MetricStore), CollectorError> {
        replay_trace(store, &self.trace, &self.bootstrap, S, DEFAULT_MAX_BRIS_PER_THREAD)
    }

    pub fn replay(&self) -> Result<MetricStore, CollectorError> {
        Ok(self.replay_into(MetricStore::in_memory()?)?.1)
    }
}

pub fn by_name(name: &str) -> Option<Scenario> {
    Some(match name {
        "lock" => lock(),
        "mysql" => mysql(),
        "chain" => chain(),
        "kafka" => kafka(),
        "teastore" => teastore(),
        _ => return None,
    })
}

pub fn all() -> Vec<Scenario> {
    NAMES.iter().map(|n| by_name(n).unwrap()).collect()
}

fn phases() -> (TsRange, TsRange) {
    (TsRange::new(0, PHASE * S).unwrap(), TsRange::new(PHASE * S, 2 * PHASE * S).unwrap())
}

/// Per-window jitter factor in [0.8, 1.2), identical for window `w` and
/// `w + PHASE`.
fn jitter(tid: u32, w: u64, stream: u64) -> f64 {
    let seed = (tid as u64) << 32 ^ (w % PHASE) << 8 ^ stream;
    ChaCha8Rng::seed_from_u64(seed).random_range(0.8..1.2)
}

fn scale(d: Nanos, f: f64) -> Nanos {
    (d as f64 * f).round() as Nanos
}

fn degraded(w: u64) -> bool {
    w >= PHASE
}

fn inet(text: &str) -> Endpoint {
    Endpoint::parse(SocketFamily::Inet4, text).unwrap()
}

/// Event timeline of one thread.
struct Script {
    thread: ThreadRef,
    now: Nanos,
    events: Vec<KernelEvent>,
}

impl Script {
    fn new(tid: u32, tgid: u32, comm: &str) -> Self {
        let mut s = Script { thread: ThreadRef::new(tid, tgid, comm), now: 0, events: Vec::new() };
        s.emit(EventKind::SchedWakeup);
        s.emit(EventKind::SchedSwitchIn);
        s
    }

    fn tid(&self) -> u32 {
        self.thread.tid
    }

    fn emit(&mut self, kind: EventKind) {
        self.events.push(KernelEvent::new(self.now, self.thread.clone(), kind));
    }

    fn run(&mut self, d: Nanos) {
        self.now += d;
    }

    fn off(&mut self, state: NextState, in_iowait: bool, d: Nanos) {
        self.emit(EventKind::SchedSwitchOut { next_state: state, in_iowait });
        self.now += d;
        if state != NextState::Running {
            self.emit(EventKind::SchedWakeup);
        }
        self.emit(EventKind::SchedSwitchIn);
    }

    fn sleep(&mut self, d: Nanos) {
        self.off(NextState::Sleep, false, d);
    }

    /// Sleeps until `t` if it is still ahead.
    fn until(&mut self, t: Nanos) {
        if t > self.now {
            self.sleep(t - self.now);
        }
    }

    fn futex_wait(&mut self, uaddr: u64, d: Nanos) {
        self.emit(EventKind::FutexEnter { uaddr, op: FutexOp::Wait, val: 0, shared: false });
        self.sleep(d);
        self.emit(EventKind::FutexExit { result: 0 });
    }

    fn futex_wake(&mut self, uaddr: u64) {
        self.emit(EventKind::FutexEnter { uaddr, op: FutexOp::Wake, val: 1, shared: false });
        self.run(2 * US);
        self.emit(EventKind::FutexExit { result: 1 });
    }

    /// Blocking FIFO access that waits `d`.
    fn pipe(&mut self, pipe: &Bri, dir: IoDir, d: Nanos) {
        let access =
            |enter| EventKind::VfsAccess { bri: pipe.clone(), dir, file_kind: FileKind::Fifo, blocking: true, enter };
        self.emit(access(true));
        self.sleep(d);
        self.emit(access(false));
    }

    fn sock(&mut self, local: &Endpoint, remote: &Endpoint, dir: SockDir, d: Nanos) {
        let family = match local {
            Endpoint::Inet(a) if a.is_ipv6() => SocketFamily::Inet6,
            Endpoint::Inet(_) => SocketFamily::Inet4,
            Endpoint::Unix(_) => SocketFamily::Unix,
        };
        let bri = Bri::socket(family, local.clone(), remote.clone());
        let access = |enter| EventKind::SockAccess { bri: bri.clone(), dir, enter, local: Some(local.clone()) };
        self.emit(access(true));
        self.sleep(d);
        self.emit(access(false));
    }

    fn epoll_ctl(&mut self, epoll: &Bri, target: &Bri) {
        self.emit(EventKind::EpollCtl { epoll: epoll.clone(), target: target.clone(), action: EpollAction::Insert });
        self.run(US);
    }

    fn epoll_wait(&mut self, epoll: &Bri, d: Nanos) {
        self.emit(EventKind::EpollWaitEnter { epoll: epoll.clone() });
        self.sleep(d);
        self.emit(EventKind::EpollWaitExit { epoll: epoll.clone() });
    }

    fn disk(&mut self, dev: &Bri, sectors: u64, d: Nanos) {
        self.emit(EventKind::BlockRq { dev: dev.clone(), sectors });
        self.off(NextState::Block, true, d);
    }

    /// Runs `body` once per window, then sleeps out the rest of it.
    fn windows(&mut self, count: u64, mut body: impl FnMut(&mut Script, u64)) {
        for w in 0..count {
            self.until(w * S);
            body(self, w);
            assert!(self.now <= (w + 1) * S, "window {w} of thread {} overflows", self.tid());
            self.until((w + 1) * S);
        }
    }
}

/// Merges thread timelines into one trace ordered by timestamp. Ties keep
/// the order in which scripts were passed.
fn merge(scripts: Vec<Script>) -> Trace {
    let mut events: Vec<(Nanos, usize, usize, KernelEvent)> = Vec::new();
    for (i, s) in scripts.into_iter().enumerate() {
        for (j, e) in s.events.into_iter().enumerate() {
            events.push((e.ts, i, j, e));
        }
    }
    events.sort_by_key(|(ts, i, j, _)| (*ts, *i, *j));
    Trace { cpus: Some(8), events: events.into_iter().map(|(_, _, _, e)| e).collect() }
}

fn names<T: Clone>(items: &[(&'static str, T)]) -> BTreeMap<&'static str, T> {
    items.iter().cloned().collect()
}

/// A connection handler (t4) waits on a lock (f1) held for longer and longer
/// by a background thread (t3). Two unrelated threads exchange data over a
/// pipe in the same process.
pub fn lock() -> Scenario {
    const TGID: u32 = 100;
    const LOCK: u64 = 0x7f00_0000_1000;
    let f1 = Bri::futex(TGID, LOCK, false);
    let p_noise = bri_of_file(12, 5001);
    let (server, client) = (inet("10.0.0.1:3306"), inet("10.0.0.2:51000"));

    let mut t1 = Script::new(1001, TGID, "log_writer");
    t1.windows(2 * PHASE, |s, w| {
        for i in 0..5 {
            s.run(scale(2 * MS, jitter(s.tid(), w, i)));
            s.pipe(&p_noise, IoDir::Write, scale(MS, jitter(s.tid(), w, 10 + i)));
            s.sleep(20 * MS);
        }
    });
    let mut t2 = Script::new(1002, TGID, "log_flusher");
    t2.windows(2 * PHASE, |s, w| {
        for i in 0..5 {
            s.pipe(&p_noise, IoDir::Read, scale(20 * MS, jitter(s.tid(), w, i)));
            s.run(MS);
        }
    });
    let mut t3 = Script::new(1003, TGID, "purge_worker");
    t3.windows(2 * PHASE, |s, w| {
        for i in 0..10 {
            s.futex_wait(LOCK, scale(3 * MS, jitter(s.tid(), w, i)));
            let hold = if degraded(w) { 45 * MS } else { 5 * MS };
            s.run(scale(hold, jitter(s.tid(), w, 20 + i)));
            s.futex_wake(LOCK);
            s.sleep(10 * MS);
        }
    });
    let mut t4 = Script::new(1004, TGID, "conn_handler");
    t4.windows(2 * PHASE, |s, w| {
        for i in 0..10 {
            s.sock(&server, &client, SockDir::Recv, scale(10 * MS, jitter(s.tid(), w, i)));
            s.run(MS);
            let wait = if degraded(w) { 40 * MS } else { 2 * MS };
            s.futex_wait(LOCK, scale(wait, jitter(s.tid(), w, 20 + i)));
            s.run(MS);
            s.futex_wake(LOCK);
            s.sock(&server, &client, SockDir::Send, 100 * US);
        }
    });
    let (baseline, compare) = phases();
    Scenario {
        name: "lock",
        description: "connection handler stalled on a lock held by a background thread",
        trace: merge(vec![t1, t2, t3, t4]),
        bootstrap: vec![TGID],
        baseline,
        compare,
        threads: names(&[("t1", 1001), ("t2", 1002), ("t3", 1003), ("t4", 1004)]),
        resources: names(&[("f1", f1), ("p1", p_noise)]),
    }
}

/// Seven database threads; t3, t4 and t6 serve network clients, t5 only
/// talks over a unix socket.
pub fn mysql() -> Scenario {
    const TGID: u32 = 200;
    let server = inet("10.0.0.1:3306");
    let unix_a = Endpoint::Unix("/run/mysqld/mysqld.sock".into());
    let unix_b = Endpoint::Unix("ino:8:4242".into());
    let mut scripts = Vec::new();
    for n in 1..=7u32 {
        let tid = 2000 + n;
        let mut s = Script::new(tid, TGID, &format!("mysqld_t{n}"));
        let client = inet(&format!("10.0.0.{}:4{n}000", 10 + n));
        let (server, unix_a, unix_b) = (server.clone(), unix_a.clone(), unix_b.clone());
        s.windows(2 * PHASE, move |s, w| {
            for i in 0..5 {
                match n {
                    3 | 4 | 6 => s.sock(&server, &client, SockDir::Recv, scale(15 * MS, jitter(tid, w, i))),
                    5 => s.sock(&unix_a, &unix_b, SockDir::Recv, scale(15 * MS, jitter(tid, w, i))),
                    _ => s.sleep(scale(15 * MS, jitter(tid, w, i))),
                }
                s.run(2 * MS);
            }
        });
        scripts.push(s);
    }
    let (baseline, compare) = phases();
    Scenario {
        name: "mysql",
        description: "thread pool where three threads serve network clients",
        trace: merge(scripts),
        bootstrap: vec![TGID],
        baseline,
        compare,
        threads: (1..=7u32).map(|n| (["t1", "t2", "t3", "t4", "t5", "t6", "t7"][n as usize - 1], 2000 + n)).collect(),
        resources: BTreeMap::new(),
    }
}

/// Degradation that travels three hops: a worker blocks on disk, so the
/// middle thread waits longer on the pipe it reads, so the entry thread
/// waits longer for the lock the middle thread releases.
pub fn chain() -> Scenario {
    const TGID: u32 = 500;
    const FA: u64 = 0x7f00_0000_2000;
    let f_a = Bri::futex(TGID, FA, false);
    let p_b = bri_of_file(12, 5101);
    let dev = Bri::BlockDev { major: 259, minor: 0 };
    let (server, client) = (inet("10.0.0.1:8000"), inet("10.0.0.3:52000"));

    let mut entry = Script::new(5001, TGID, "frontend");
    entry.windows(2 * PHASE, |s, w| {
        for i in 0..10 {
            s.sock(&server, &client, SockDir::Recv, scale(5 * MS, jitter(s.tid(), w, i)));
            let wait = if degraded(w) { 30 * MS } else { 3 * MS };
            s.futex_wait(FA, scale(wait, jitter(s.tid(), w, 20 + i)));
            s.run(MS);
        }
    });
    let mut mid = Script::new(5002, TGID, "dispatcher");
    mid.windows(2 * PHASE, |s, w| {
        for i in 0..10 {
            let wait = if degraded(w) { 40 * MS } else { 4 * MS };
            s.pipe(&p_b, IoDir::Read, scale(wait, jitter(s.tid(), w, i)));
            s.run(MS);
            s.futex_wake(FA);
        }
    });
    let mut worker = Script::new(5003, TGID, "storage_worker");
    worker.windows(2 * PHASE, |s, w| {
        for i in 0..10 {
            s.run(2 * MS);
            let io = if degraded(w) { 30 * MS } else { 2 * MS };
            s.disk(&dev, 16, scale(io, jitter(s.tid(), w, i)));
            s.pipe(&p_b, IoDir::Write, scale(500 * US, jitter(s.tid(), w, 20 + i)));
        }
    });
    let (baseline, compare) = phases();
    Scenario {
        name: "chain",
        description: "three-hop propagation from a disk-bound worker to the entry thread",
        trace: merge(vec![entry, mid, worker]),
        bootstrap: vec![TGID],
        baseline,
        compare,
        threads: names(&[("entry", 5001), ("mid", 5002), ("worker", 5003)]),
        resources: names(&[("f_a", f_a), ("p_b", p_b), ("dev", dev)]),
    }
}

/// Broker whose network thread t9 waits on epoll e1 for pipe p1, written by
/// eight disk-bound workers. A second network thread t10 is unaffected and a
/// process outside the broker writes to the same disk.
pub fn kafka() -> Scenario {
    const TGID: u32 = 400;
    const OTHER: u32 = 900;
    let p1 = bri_of_file(12, 7001);
    let e1 = Bri::EpollObj { kaddr: 0xffff_8880_0000_1000 };
    let e2 = Bri::EpollObj { kaddr: 0xffff_8880_0000_2000 };
    let dev = Bri::BlockDev { major: 259, minor: 1 };
    let server = inet("10.0.0.1:9092");

    let mut scripts = Vec::new();
    for n in 1..=8u32 {
        let mut s = Script::new(4000 + n, TGID, &format!("data-plane-{n}"));
        let (p1, dev) = (p1.clone(), dev.clone());
        s.windows(2 * PHASE, move |s, w| {
            for i in 0..6 {
                s.run(scale(3 * MS, jitter(s.tid(), w, i)));
                let io = if degraded(w) { 60 * MS } else { 5 * MS };
                s.disk(&dev, 64, scale(io, jitter(s.tid(), w, 10 + i)));
                s.pipe(&p1, IoDir::Write, scale(300 * US, jitter(s.tid(), w, 20 + i)));
            }
        });
        scripts.push(s);
    }
    let mut t9 = Script::new(4009, TGID, "network-1");
    let client9 = inet("10.0.0.21:53000");
    t9.epoll_ctl(&e1, &p1);
    t9.windows(2 * PHASE, |s, w| {
        for i in 0..8 {
            let wait = if degraded(w) { 95 * MS } else { 30 * MS };
            s.epoll_wait(&e1, scale(wait, jitter(s.tid(), w, i)));
            s.pipe(&p1, IoDir::Read, scale(50 * US, jitter(s.tid(), w, 40 + i)));
            s.run(500 * US);
            s.sock(&server, &client9, SockDir::Send, scale(200 * US, jitter(s.tid(), w, 20 + i)));
        }
    });
    scripts.push(t9);
    let mut t10 = Script::new(4010, TGID, "network-2");
    let client10 = inet("10.0.0.22:53001");
    let s10 = Bri::socket(SocketFamily::Inet4, server.clone(), client10.clone());
    t10.epoll_ctl(&e2, &s10);
    t10.windows(2 * PHASE, |s, w| {
        for i in 0..10 {
            s.epoll_wait(&e2, scale(40 * MS, jitter(s.tid(), w, i)));
            s.run(500 * US);
            s.sock(&server, &client10, SockDir::Send, scale(200 * US, jitter(s.tid(), w, 20 + i)));
        }
    });
    scripts.push(t10);
    let mut backup = Script::new(9001, OTHER, "backup");
    backup.windows(2 * PHASE, |s, w| {
        for i in 0..6 {
            s.disk(&dev, 128, scale(10 * MS, jitter(s.tid(), w, i)));
            s.sleep(50 * MS);
        }
    });
    scripts.push(backup);
    let (baseline, compare) = phases();
    let mut threads: BTreeMap<&'static str, u32> =
        (1..=8u32).map(|n| (["t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8"][n as usize - 1], 4000 + n)).collect();
    threads.insert("t9", 4009);
    threads.insert("t10", 4010);
    threads.insert("backup", 9001);
    Scenario {
        name: "kafka",
        description: "network thread starved by a pipe fed from disk-bound workers",
        trace: merge(scripts),
        bootstrap: vec![TGID],
        baseline,
        compare,
        threads,
        resources: names(&[("p1", p1), ("e1", e1), ("e2", e2), ("dev", dev)]),
    }
}

/// Web frontend whose persistence client waits longer and longer for an
/// external database.
pub fn teastore() -> Scenario {
    const TGID: u32 = 300;
    const QUEUE: u64 = 0x7f00_0000_3000;
    let server = inet("10.0.0.1:8080");
    let browser = inet("10.0.0.9:40000");
    let local_db = inet("10.0.0.1:47000");
    let db = inet("10.0.0.50:3306");

    let mut t1 = Script::new(3001, TGID, "http-nio-1");
    t1.windows(2 * PHASE, |s, w| {
        for i in 0..10 {
            s.sock(&server, &browser, SockDir::Recv, scale(20 * MS, jitter(s.tid(), w, i)));
            s.run(2 * MS);
            s.futex_wake(QUEUE);
            s.sock(&server, &browser, SockDir::Send, 100 * US);
        }
    });
    let mut t2 = Script::new(3002, TGID, "persistence");
    t2.windows(2 * PHASE, |s, w| {
        for i in 0..10 {
            s.futex_wait(QUEUE, scale(10 * MS, jitter(s.tid(), w, i)));
            s.sock(&local_db, &db, SockDir::Send, 100 * US);
            let wait = if degraded(w) { 60 * MS } else { 5 * MS };
            s.sock(&local_db, &db, SockDir::Recv, scale(wait, jitter(s.tid(), w, 20 + i)));
            s.run(MS);
        }
    });
    let (baseline, compare) = phases();
    Scenario {
        name: "teastore",
        description: "frontend slowed down by an external database",
        trace: merge(vec![t1, t2]),
        bootstrap: vec![TGID],
        baseline,
        compare,
        threads: names(&[("t1", 3001), ("t2", 3002)]),
        resources: names(&[
            ("f1", Bri::futex(TGID, QUEUE, false)),
            ("db", Bri::socket(SocketFamily::Inet4, local_db, db)),
            ("browser", Bri::socket(SocketFamily::Inet4, server, browser)),
        ]),
    }
}

/// A store filled with random per-window samples: 2 to 8 threads sharing
/// futexes, pipes and sockets, where a random subset of series shifts in
/// the second half.
pub fn random_store(seed: u64) -> Result<(MetricStore, TsRange, TsRange), crate::StoreError> {
    use crate::model::{MetricKind::*, MetricSample, Subject, ThreadMeta, TimeWindow, WaitDir};
    use crate::store::StoreRecord;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tgid = 10;
    let n_threads = rng.random_range(2..=8u32);
    type Roles = [(crate::model::MetricKind, Option<WaitDir>); 2];
    let mut resources: Vec<(Bri, Roles)> = Vec::new();
    for i in 0..rng.random_range(1..=3u64) {
        resources.push((Bri::futex(tgid, 0x1000 + i * 8, false), [(FutexWaitTime, None), (FutexWakeCount, None)]));
    }
    for i in 0..rng.random_range(0..=2u64) {
        resources.push((bri_of_file(12, 100 + i), [(PipeWaitTime, Some(WaitDir::Read)), (PipeWaitTime, Some(WaitDir::Write))]));
    }
    for i in 0..rng.random_range(0..=2u32) {
        let remote = inet(&format!("10.1.0.{}:5000", i + 1));
        let bri = Bri::socket(SocketFamily::Inet4, inet("10.0.0.1:80"), remote);
        resources.push((bri, [(SocketWaitTime, Some(WaitDir::Read)), (SocketWaitTime, Some(WaitDir::Write))]));
    }
    if rng.random_bool(0.5) {
        let bri = Bri::socket(SocketFamily::Unix, Endpoint::Unix("/tmp/r.sock".into()), Endpoint::Unix("ino:1:2".into()));
        resources.push((bri, [(SocketWaitTime, Some(WaitDir::Read)), (SocketWaitTime, Some(WaitDir::Write))]));
    }

    // (tid, metric, resource, dir, base, shift factor, presence probability)
    type Series = (u32, crate::model::MetricKind, Option<Bri>, Option<WaitDir>, f64, f64, f64);
    let mut series: Vec<Series> = Vec::new();
    let shift = |rng: &mut ChaCha8Rng| if rng.random_bool(0.25) { rng.random_range(2.0..6.0) } else { 1.0 };
    let mut threads = Vec::new();
    for t in 0..n_threads {
        let tid = 100 + t;
        threads.push(ThreadRef::new(tid, tgid, format!("r{t}")));
        for metric in [Runtime, RqTime, SleepTime, BlockTime] {
            series.push((tid, metric, None, None, rng.random_range(1e6..1e8), shift(&mut rng), 1.0));
        }
        for (bri, roles) in &resources {
            if rng.random_bool(0.4) {
                let (metric, dir) = roles[rng.random_range(0..2)];
                let base = if metric == FutexWakeCount { rng.random_range(5.0..50.0) } else { rng.random_range(1e5..1e7) };
                series.push((tid, metric, Some(bri.clone()), dir, base, shift(&mut rng), rng.random_range(0.6..1.0)));
            }
        }
    }

    let mut store = MetricStore::in_memory()?;
    store.set_meta("window_ns", &S.to_string())?;
    let mut records: Vec<StoreRecord> = threads
        .iter()
        .map(|t| StoreRecord::Thread(ThreadMeta { tid: t.tid, tgid, comm: t.comm.clone(), first_seen: 0 }))
        .collect();
    for w in 0..2 * PHASE {
        for (tid, metric, resource, dir, base, factor, presence) in &series {
            if !rng.random_bool(*presence) {
                continue;
            }
            let level = if degraded(w) { base * factor } else { *base };
            let value = (level * rng.random_range(0.5..1.5)).max(1.0) as u64;
            records.push(StoreRecord::Sample(MetricSample {
                window: TimeWindow { start_ns: w * S, end_ns: (w + 1) * S },
                subject: Subject::Thread(threads[(*tid - 100) as usize].clone()),
                metric: *metric,
                resource: resource.clone(),
                dir: *dir,
                value,
            }));
        }
    }
    store.append(&records)?;
    let (baseline, compare) = phases();
    Ok((store, baseline, compare))
}
