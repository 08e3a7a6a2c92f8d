//! Session driver: feeds events from a trace or from live probes through
//! discovery and the metric engine into a store.

pub mod discovery;
pub mod live;
pub mod maps;
pub mod wire;

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use serde::Serialize;

pub use discovery::{Discovered, Discovery};
pub use live::{LiveConfig, ReorderBuffer};

use crate::engine::{MetricEngine, WindowBatch};
use crate::error::CollectorError;
use crate::model::{Bri, EventKind, KernelEvent, Nanos, ProcessMeta, ThreadMeta, NANOS_PER_SEC};
use crate::store::{MetricStore, StoreRecord};
use crate::trace::{read_trace_file, Trace};

pub const DEFAULT_MAX_BRIS_PER_THREAD: usize = 128;

#[derive(Debug, Clone)]
pub enum Source {
    Replay { trace_path: PathBuf },
    Live(LiveConfig),
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub source: Source,
    /// Processes to start from. Empty means every process in a replayed
    /// trace; live sessions require at least one.
    pub bootstrap_pids: Vec<u32>,
    pub window_ns: Nanos,
    pub output_db_path: PathBuf,
    pub max_bris_per_thread: usize,
}

impl SessionConfig {
    pub fn replay(trace_path: impl Into<PathBuf>, output_db_path: impl Into<PathBuf>) -> Self {
        SessionConfig {
            source: Source::Replay { trace_path: trace_path.into() },
            bootstrap_pids: Vec::new(),
            window_ns: NANOS_PER_SEC,
            output_db_path: output_db_path.into(),
            max_bris_per_thread: DEFAULT_MAX_BRIS_PER_THREAD,
        }
    }

    pub fn validate(&self) -> Result<(), CollectorError> {
        if self.window_ns == 0 {
            return Err(CollectorError::Config("window_ns must be positive".into()));
        }
        if self.max_bris_per_thread == 0 {
            return Err(CollectorError::Config("max_bris_per_thread must be positive".into()));
        }
        if matches!(self.source, Source::Live(_)) && self.bootstrap_pids.is_empty() {
            return Err(CollectorError::Config("live sessions need at least one bootstrap pid".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SessionSummary {
    /// Windows that produced at least one sample.
    pub windows: u64,
    /// Threads of monitored processes.
    pub threads: u64,
    pub processes: u64,
    pub discovery_edges: u64,
    pub events: u64,
    /// Events of unmonitored processes that were not metered.
    pub dropped_events: u64,
    pub orphans: u64,
    pub replaced_enters: u64,
    /// Resources pushed out of a thread's bounded tracking set.
    pub bri_evictions: u64,
    /// Live events that arrived too late to be ordered.
    pub late_events: u64,
}

/// Bounded per-thread resource set with least-recently-used eviction.
#[derive(Debug, Default)]
struct BriTracker {
    limit: usize,
    clock: u64,
    per_thread: HashMap<u32, HashMap<Bri, u64>>,
    evictions: u64,
}

impl BriTracker {
    fn touch(&mut self, tid: u32, bri: &Bri) {
        self.clock += 1;
        let set = self.per_thread.entry(tid).or_default();
        if !set.contains_key(bri) && set.len() >= self.limit {
            let oldest = set.iter().min_by_key(|(_, t)| **t).map(|(b, _)| b.clone()).unwrap();
            set.remove(&oldest);
            self.evictions += 1;
        }
        set.insert(bri.clone(), self.clock);
    }
}

fn touched_bris(kind: &EventKind) -> Vec<&Bri> {
    match kind {
        EventKind::VfsAccess { bri, .. } | EventKind::SockAccess { bri, .. } => vec![bri],
        EventKind::PollEnter { bris, .. } => bris.iter().collect(),
        EventKind::EpollWaitEnter { epoll } | EventKind::EpollWaitExit { epoll } => vec![epoll],
        EventKind::EpollCtl { epoll, target, .. } => vec![epoll, target],
        EventKind::BlockRq { dev, .. } => vec![dev],
        _ => Vec::new(),
    }
}

/// Single ingestion sequence of a session.
pub struct Session {
    store: MetricStore,
    engine: MetricEngine,
    discovery: Discovery,
    bootstrap: BTreeSet<u32>,
    tracker: BriTracker,
    first_seen_tgid: HashMap<u32, (String, Nanos)>,
    first_seen_tid: HashMap<u32, Nanos>,
    parents: HashMap<u32, u32>,
    recorded_tgids: BTreeSet<u32>,
    recorded_tids: BTreeSet<u32>,
    pending: Vec<StoreRecord>,
    summary: SessionSummary,
}

impl Session {
    pub fn new(
        mut store: MetricStore,
        bootstrap: &[u32],
        window_ns: Nanos,
        cpus: Option<u32>,
        max_bris_per_thread: usize,
    ) -> Result<Self, CollectorError> {
        store.set_meta("window_ns", &window_ns.to_string())?;
        if let Some(cpus) = cpus {
            store.set_meta("cpus", &cpus.to_string())?;
        }
        let pids: Vec<String> = bootstrap.iter().map(u32::to_string).collect();
        store.set_meta("bootstrap_pids", &pids.join(","))?;
        Ok(Session {
            store,
            engine: MetricEngine::new(window_ns),
            discovery: Discovery::new(bootstrap),
            bootstrap: bootstrap.iter().copied().collect(),
            tracker: BriTracker { limit: max_bris_per_thread, ..BriTracker::default() },
            first_seen_tgid: HashMap::new(),
            first_seen_tid: HashMap::new(),
            parents: HashMap::new(),
            recorded_tgids: BTreeSet::new(),
            recorded_tids: BTreeSet::new(),
            pending: Vec::new(),
            summary: SessionSummary::default(),
        })
    }

    pub fn set_cpus(&mut self, cpus: u32) -> Result<(), CollectorError> {
        Ok(self.store.set_meta("cpus", &cpus.to_string())?)
    }

    pub fn is_monitored(&self, tgid: u32) -> bool {
        self.discovery.is_monitored(tgid)
    }

    /// Applies one event in timestamp order. Returns processes that joined
    /// the monitored set because of it.
    pub fn ingest(&mut self, event: &KernelEvent) -> Result<Vec<u32>, CollectorError> {
        self.summary.events += 1;
        let tgid = event.thread.tgid;
        self.first_seen_tgid.entry(tgid).or_insert_with(|| (event.thread.comm.clone(), event.ts));
        self.first_seen_tid.entry(event.thread.tid).or_insert(event.ts);

        let found = self.discovery.observe(event);
        let mut joined = Vec::new();
        for (child, parent) in found.joined {
            self.parents.insert(child, parent);
            joined.push(child);
            self.record_process(child);
        }
        self.summary.discovery_edges += found.edges.len() as u64;
        self.pending.extend(found.edges.into_iter().map(StoreRecord::Edge));

        let monitored = self.discovery.is_monitored(tgid);
        if !monitored && !matches!(event.kind, EventKind::BlockRq { .. }) {
            self.summary.dropped_events += 1;
            return Ok(joined);
        }
        if monitored {
            self.record_process(tgid);
            self.record_thread(event);
            for bri in touched_bris(&event.kind) {
                self.tracker.touch(event.thread.tid, bri);
            }
        }
        let batches = self.engine.observe(event)?;
        self.write(batches)?;
        Ok(joined)
    }

    fn record_process(&mut self, tgid: u32) {
        if !self.recorded_tgids.insert(tgid) {
            return;
        }
        let (comm, first_seen) = self.first_seen_tgid.get(&tgid).cloned().unwrap_or_default();
        self.summary.processes += 1;
        self.pending.push(StoreRecord::Process(ProcessMeta {
            tgid,
            comm,
            first_seen,
            parent_tgid: self.parents.get(&tgid).copied(),
        }));
    }

    fn record_thread(&mut self, event: &KernelEvent) {
        let tid = event.thread.tid;
        if !self.recorded_tids.insert(tid) {
            return;
        }
        self.summary.threads += 1;
        self.pending.push(StoreRecord::Thread(ThreadMeta {
            tid,
            tgid: event.thread.tgid,
            comm: event.thread.comm.clone(),
            first_seen: self.first_seen_tid[&tid],
        }));
    }

    fn write(&mut self, batches: Vec<WindowBatch>) -> Result<(), CollectorError> {
        let mut records = std::mem::take(&mut self.pending);
        for batch in batches {
            if !batch.samples.is_empty() {
                self.summary.windows += 1;
            }
            records.extend(batch.samples.into_iter().map(StoreRecord::Sample));
        }
        if !records.is_empty() {
            self.store.append(&records)?;
        }
        Ok(())
    }

    /// Processes currently monitored, for handing back to live probes.
    pub fn monitored(&self) -> Vec<u32> {
        let mut all: BTreeSet<u32> = self.discovery.monitored().clone();
        all.extend(&self.bootstrap);
        all.into_iter().collect()
    }

    pub fn note_late_event(&mut self) {
        self.summary.late_events += 1;
    }

    /// Closes the last window and writes remaining metadata and edges.
    pub fn finish(mut self) -> Result<(SessionSummary, MetricStore), CollectorError> {
        let batches = self.engine.finish();
        let external = self.discovery.external_edges();
        self.summary.discovery_edges += external.len() as u64;
        self.pending.extend(external.into_iter().map(StoreRecord::Edge));
        self.write(batches)?;
        let diag = self.engine.diagnostics();
        self.summary.orphans = diag.orphans;
        self.summary.replaced_enters = diag.replaced_enters;
        self.summary.bri_evictions = self.tracker.evictions;
        Ok((self.summary, self.store))
    }
}

/// Replays an in-memory trace into `store`.
pub fn replay_trace(
    store: MetricStore,
    trace: &Trace,
    bootstrap: &[u32],
    window_ns: Nanos,
    max_bris_per_thread: usize,
) -> Result<(SessionSummary, MetricStore), CollectorError> {
    let mut session = Session::new(store, bootstrap, window_ns, trace.cpus, max_bris_per_thread)?;
    for event in &trace.events {
        session.ingest(event)?;
    }
    session.finish()
}

/// Runs a session to completion. Replays are deterministic: the same trace
/// and config give identical store contents.
pub fn run_session(config: &SessionConfig) -> Result<SessionSummary, CollectorError> {
    config.validate()?;
    match &config.source {
        Source::Replay { trace_path } => {
            let trace = read_trace_file(trace_path)?;
            let store = MetricStore::create(&config.output_db_path)?;
            Ok(replay_trace(store, &trace, &config.bootstrap_pids, config.window_ns, config.max_bris_per_thread)?.0)
        }
        Source::Live(live) => live::run_live(config, live),
    }
}
