//! Thread dynamics graph and process dependency graph.
//!
//! Thread graph edges follow the direction of the signal between threads:
//!
//! * `writes`: thread -> pipe/socket it blocked writing to
//! * `reads`: pipe/socket -> thread that blocked reading (or polling) it
//! * `wakes`: thread -> futex it woke waiters on
//! * `waits_on`: thread -> futex/epoll it waited on
//! * `schedules`: waker thread -> waiter thread sharing a futex
//! * `registered_in`: file -> epoll whose waits it was registered for
//! * `io_to`: thread -> block device
//!
//! A contended futex shows up as threads that both wait on and wake it. Weights are the summed store values over the range:
//! nanoseconds for time edges, wake counts for `wakes` and `schedules`,
//! sectors for `io_to`.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::StoreError;
use crate::model::{Bri, BriKind, MetricKind, MetricSample, Nanos, Peer, Subject, TimeWindow, WaitDir};
use crate::store::MetricStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Thread,
    Futex,
    Pipe,
    Socket,
    Epoll,
    Device,
    External,
}

impl NodeKind {
    fn of(bri: &Bri) -> NodeKind {
        match bri.kind() {
            BriKind::Pipe => NodeKind::Pipe,
            BriKind::Socket => NodeKind::Socket,
            BriKind::Futex => NodeKind::Futex,
            BriKind::Epoll => NodeKind::Epoll,
            BriKind::Device => NodeKind::Device,
        }
    }

    fn alias_prefix(self) -> &'static str {
        match self {
            NodeKind::Thread => "t",
            NodeKind::Futex => "f",
            NodeKind::Pipe => "p",
            NodeKind::Socket => "s",
            NodeKind::Epoll => "e",
            NodeKind::Device => "d",
            NodeKind::External => "x",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DynNode {
    /// `tid:<n>` for threads, the resource key otherwise.
    pub id: String,
    pub kind: NodeKind,
    /// Short display name such as `t3` or `f1`.
    pub alias: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tid: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tgid: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comm: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    WaitsOn,
    Wakes,
    Writes,
    Reads,
    Schedules,
    RegisteredIn,
    IoTo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightUnit {
    Ns,
    Count,
    Sectors,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DynEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
    pub weight: u64,
    pub unit: WeightUnit,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ThreadDynamicsGraph {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range: Option<TimeWindow>,
    pub nodes: Vec<DynNode>,
    pub edges: Vec<DynEdge>,
}

impl ThreadDynamicsGraph {
    pub fn node(&self, id: &str) -> Option<&DynNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_by_alias(&self, alias: &str) -> Option<&DynNode> {
        self.nodes.iter().find(|n| n.alias == alias)
    }

    pub fn edge(&self, from: &str, to: &str, kind: EdgeKind) -> Option<&DynEdge> {
        self.edges.iter().find(|e| e.from == from && e.to == to && e.kind == kind)
    }

    pub fn has_edge(&self, from: &str, to: &str, kind: EdgeKind) -> bool {
        self.edge(from, to, kind).is_some()
    }
}

pub fn thread_id(tid: u32) -> String {
    format!("tid:{tid}")
}

/// Edges lighter than this are dropped, along with resources left without
/// edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct EdgeThreshold {
    pub min_ns: u64,
    pub min_count: u64,
}

impl Default for EdgeThreshold {
    fn default() -> Self {
        EdgeThreshold { min_ns: 1_000_000, min_count: 1 }
    }
}

impl EdgeThreshold {
    /// Keeps every nonzero edge.
    pub const NONE: EdgeThreshold = EdgeThreshold { min_ns: 1, min_count: 1 };

    fn keeps(&self, weight: u64, unit: WeightUnit) -> bool {
        weight > 0
            && match unit {
                WeightUnit::Ns => weight >= self.min_ns,
                WeightUnit::Count | WeightUnit::Sectors => weight >= self.min_count,
            }
    }
}

/// Builds the thread graph for threads of `tgids` (all when `None`) over
/// `range` (whole store when `None`).
pub fn build_thread_graph(
    store: &MetricStore,
    range: Option<TimeWindow>,
    tgids: Option<&BTreeSet<u32>>,
    threshold: EdgeThreshold,
) -> Result<ThreadDynamicsGraph, StoreError> {
    let samples = store.load_samples(range, tgids)?;
    let mut graph = graph_from_samples(&samples, threshold);
    graph.range = range;
    Ok(graph)
}

/// Pure construction from samples.
pub fn graph_from_samples(samples: &[MetricSample], threshold: EdgeThreshold) -> ThreadDynamicsGraph {
    let mut ordered: Vec<&MetricSample> = samples.iter().collect();
    ordered.sort_by(|a, b| {
        let key = |s: &MetricSample| {
            let who = match &s.subject {
                Subject::Thread(t) => (0, t.tid, String::new()),
                Subject::Epoll(e) => (1, 0, e.key()),
            };
            (s.window.start_ns, who, s.metric, s.resource.as_ref().map(Bri::key), s.dir)
        };
        key(a).cmp(&key(b))
    });

    // nodes in order of first appearance
    type ThreadInfo = Option<(u32, u32, String)>;
    let mut nodes: Vec<(String, NodeKind, ThreadInfo)> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut add_node = |nodes: &mut Vec<_>, id: String, kind: NodeKind, thread: ThreadInfo| {
        if seen.insert(id.clone()) {
            nodes.push((id, kind, thread));
        }
    };

    let mut edges: BTreeMap<(String, String, EdgeKind), (u64, WeightUnit)> = BTreeMap::new();
    let mut add_edge = |from: String, to: String, kind: EdgeKind, value: u64, unit: WeightUnit| {
        edges.entry((from, to, kind)).or_insert((0, unit)).0 += value;
    };
    // futex -> (wakers with counts, waiters)
    let mut futex_roles: BTreeMap<String, (BTreeMap<u32, u64>, BTreeSet<u32>)> = BTreeMap::new();

    for s in ordered {
        match &s.subject {
            Subject::Thread(t) => {
                let tid_id = thread_id(t.tid);
                add_node(&mut nodes, tid_id.clone(), NodeKind::Thread, Some((t.tid, t.tgid, t.comm.clone())));
                let Some(bri) = &s.resource else { continue };
                let key = bri.key();
                add_node(&mut nodes, key.clone(), NodeKind::of(bri), None);
                use MetricKind::*;
                match s.metric {
                    FutexWaitTime => {
                        add_edge(tid_id, key.clone(), EdgeKind::WaitsOn, s.value, WeightUnit::Ns);
                        if s.value > 0 {
                            futex_roles.entry(key).or_default().1.insert(t.tid);
                        }
                    }
                    FutexWakeCount => {
                        add_edge(tid_id, key.clone(), EdgeKind::Wakes, s.value, WeightUnit::Count);
                        *futex_roles.entry(key).or_default().0.entry(t.tid).or_insert(0) += s.value;
                    }
                    EpollWaitTime => add_edge(tid_id, key, EdgeKind::WaitsOn, s.value, WeightUnit::Ns),
                    PipeWaitTime | SocketWaitTime => match s.dir {
                        Some(WaitDir::Write) => add_edge(tid_id, key, EdgeKind::Writes, s.value, WeightUnit::Ns),
                        _ => add_edge(key, tid_id, EdgeKind::Reads, s.value, WeightUnit::Ns),
                    },
                    SectorCount => add_edge(tid_id, key, EdgeKind::IoTo, s.value, WeightUnit::Sectors),
                    _ => {}
                }
            }
            Subject::Epoll(epoll) => {
                let Some(file) = &s.resource else { continue };
                add_node(&mut nodes, epoll.key(), NodeKind::Epoll, None);
                add_node(&mut nodes, file.key(), NodeKind::of(file), None);
                add_edge(file.key(), epoll.key(), EdgeKind::RegisteredIn, s.value, WeightUnit::Ns);
            }
        }
    }

    for (wakers, waiters) in futex_roles.values() {
        for (waker, count) in wakers {
            for waiter in waiters {
                if waker != waiter && *count > 0 {
                    add_edge(thread_id(*waker), thread_id(*waiter), EdgeKind::Schedules, *count, WeightUnit::Count);
                }
            }
        }
    }

    let edges: Vec<DynEdge> = edges
        .into_iter()
        .filter(|(_, (w, unit))| threshold.keeps(*w, *unit))
        .map(|((from, to, kind), (weight, unit))| DynEdge { from, to, kind, weight, unit })
        .collect();
    let linked: BTreeSet<&str> = edges.iter().flat_map(|e| [e.from.as_str(), e.to.as_str()]).collect();
    let mut counters: BTreeMap<NodeKind, usize> = BTreeMap::new();
    let nodes = nodes
        .into_iter()
        .filter(|(id, kind, _)| *kind == NodeKind::Thread || linked.contains(id.as_str()))
        .map(|(id, kind, thread)| {
            let n = counters.entry(kind).or_insert(0);
            *n += 1;
            let (tid, tgid, comm) = match thread {
                Some((tid, tgid, comm)) => (Some(tid), Some(tgid), Some(comm)),
                None => (None, None, None),
            };
            DynNode { id, kind, alias: format!("{}{}", kind.alias_prefix(), n), tid, tgid, comm }
        })
        .collect();
    ThreadDynamicsGraph { range: None, nodes, edges }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessNodeKind {
    Process,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessNode {
    /// The peer label: `tgid:<n>` or `external:<endpoint>`.
    pub id: String,
    pub kind: ProcessNodeKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tgid: Option<u32>,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_seen: Option<Nanos>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessEdge {
    pub from: String,
    pub to: String,
    pub via: String,
    pub first_seen: Nanos,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ProcessGraph {
    pub nodes: Vec<ProcessNode>,
    pub edges: Vec<ProcessEdge>,
}

impl ProcessGraph {
    /// Adjacency list keyed by node id, sorted, independent of layout.
    pub fn adjacency(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut adj: BTreeMap<String, BTreeSet<String>> = self.nodes.iter().map(|n| (n.id.clone(), BTreeSet::new())).collect();
        for e in &self.edges {
            adj.entry(e.from.clone()).or_default().insert(e.to.clone());
        }
        adj
    }
}

/// Processes and discovery edges known by the end of `range`.
pub fn build_process_graph(store: &MetricStore, range: Option<TimeWindow>) -> Result<ProcessGraph, StoreError> {
    let end = range.map(|r| r.end_ns).unwrap_or(Nanos::MAX);
    let mut graph = ProcessGraph::default();
    let mut ids = BTreeSet::new();
    for p in store.processes()?.into_iter().filter(|p| p.first_seen < end) {
        let id = Peer::Process(p.tgid).label();
        ids.insert(id.clone());
        graph.nodes.push(ProcessNode {
            id,
            kind: ProcessNodeKind::Process,
            tgid: Some(p.tgid),
            label: format!("{} ({})", p.comm, p.tgid),
            first_seen: Some(p.first_seen),
        });
    }
    let mut externals = BTreeSet::new();
    for e in store.discovery_edges()?.into_iter().filter(|e| e.first_seen < end) {
        let to = e.to.label();
        if let Peer::External(ep) = &e.to {
            externals.insert((to.clone(), ep.clone()));
        } else if !ids.contains(&to) {
            continue;
        }
        if !ids.contains(&Peer::Process(e.from_tgid).label()) {
            continue;
        }
        graph.edges.push(ProcessEdge { from: Peer::Process(e.from_tgid).label(), to, via: e.via.key(), first_seen: e.first_seen });
    }
    for (id, ep) in externals {
        graph.nodes.push(ProcessNode { id, kind: ProcessNodeKind::External, tgid: None, label: ep, first_seen: None });
    }
    Ok(graph)
}
