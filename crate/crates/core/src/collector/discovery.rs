//! Transitive process discovery over shared pipes and sockets.
//!
//! Every socket access and every FIFO access records which processes touched
//! the resource. The first time a monitored process and another process are
//! both seen on one resource an edge is emitted, and the other process joins
//! the monitored set. Its own traffic then discovers further processes.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::model::{Bri, DiscoveryEdge, Endpoint, EventKind, FileKind, KernelEvent, Nanos, Peer};

#[derive(Debug, Default)]
struct Sharers {
    /// tgid -> first access
    tgids: BTreeMap<u32, Nanos>,
    /// local endpoint reported by the first accessor, for inet sockets
    local: Option<(u32, Endpoint)>,
}

/// Outcome of one observed event.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct Discovered {
    pub edges: Vec<DiscoveryEdge>,
    /// Processes that joined the monitored set, with the process they were
    /// reached from.
    pub joined: Vec<(u32, u32)>,
}

#[derive(Debug)]
pub struct Discovery {
    monitor_all: bool,
    monitored: BTreeSet<u32>,
    sharers: BTreeMap<Bri, Sharers>,
    emitted: HashSet<(u32, u32, Bri)>,
}

impl Discovery {
    /// With no bootstrap processes every process counts as monitored.
    pub fn new(bootstrap: &[u32]) -> Self {
        Discovery {
            monitor_all: bootstrap.is_empty(),
            monitored: bootstrap.iter().copied().collect(),
            sharers: BTreeMap::new(),
            emitted: HashSet::new(),
        }
    }

    pub fn is_monitored(&self, tgid: u32) -> bool {
        self.monitor_all || self.monitored.contains(&tgid)
    }

    pub fn monitors_all(&self) -> bool {
        self.monitor_all
    }

    pub fn monitored(&self) -> &BTreeSet<u32> {
        &self.monitored
    }

    fn shared_resource(event: &KernelEvent) -> Option<(&Bri, Option<&Endpoint>)> {
        match &event.kind {
            EventKind::SockAccess { bri, local, .. } => Some((bri, local.as_ref())),
            EventKind::VfsAccess { bri, file_kind: FileKind::Fifo, .. } => Some((bri, None)),
            _ => None,
        }
    }

    pub fn observe(&mut self, event: &KernelEvent) -> Discovered {
        let mut out = Discovered::default();
        let Some((bri, local)) = Self::shared_resource(event) else {
            return out;
        };
        let me = event.thread.tgid;
        let entry = self.sharers.entry(bri.clone()).or_default();
        if entry.local.is_none() {
            if let Some(local) = local {
                entry.local = Some((me, local.clone()));
            }
        }
        if entry.tgids.contains_key(&me) {
            return out;
        }
        entry.tgids.insert(me, event.ts);
        let others: Vec<u32> = entry.tgids.keys().copied().filter(|t| *t != me).collect();
        for other in others {
            let (from, to) = match (self.is_monitored(other), self.is_monitored(me)) {
                (true, _) => (other, me),
                (false, true) => (me, other),
                (false, false) => continue,
            };
            let pair = (from.min(to), from.max(to), bri.clone());
            if !self.emitted.insert(pair) {
                continue;
            }
            if !self.is_monitored(to) {
                self.monitored.insert(to);
                out.joined.push((to, from));
            }
            out.edges.push(DiscoveryEdge { from_tgid: from, to: Peer::Process(to), via: bri.clone(), first_seen: event.ts });
        }
        out
    }

    /// Edges to endpoints outside the host: inet sockets that only one
    /// monitored process ever touched.
    pub fn external_edges(&self) -> Vec<DiscoveryEdge> {
        let mut out = Vec::new();
        for (bri, sharers) in &self.sharers {
            let Bri::SocketTuple { b, .. } = bri else { continue };
            if !bri.is_inet_socket() || sharers.tgids.len() != 1 {
                continue;
            }
            let (&tgid, &first_seen) = sharers.tgids.iter().next().unwrap();
            if !self.is_monitored(tgid) {
                continue;
            }
            let remote = sharers
                .local
                .as_ref()
                .and_then(|(_, local)| bri.peer_of(local))
                .unwrap_or(b);
            out.push(DiscoveryEdge {
                from_tgid: tgid,
                to: Peer::External(remote.to_string()),
                via: bri.clone(),
                first_seen,
            });
        }
        out.sort_by_key(|x| (x.first_seen, x.from_tgid, x.to.label()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bri_of_file, IoDir, SockDir, SocketFamily, ThreadRef};

    fn unix_sock() -> Bri {
        Bri::socket(SocketFamily::Unix, Endpoint::Unix("/run/a.sock".into()), Endpoint::Unix("ino:0:9".into()))
    }

    fn sock(ts: Nanos, tgid: u32, bri: &Bri) -> KernelEvent {
        KernelEvent::new(
            ts,
            ThreadRef::new(tgid, tgid, "p"),
            EventKind::SockAccess { bri: bri.clone(), dir: SockDir::Send, enter: true, local: None },
        )
    }

    fn fifo(ts: Nanos, tgid: u32, bri: &Bri) -> KernelEvent {
        KernelEvent::new(
            ts,
            ThreadRef::new(tgid, tgid, "p"),
            EventKind::VfsAccess { bri: bri.clone(), dir: IoDir::Write, file_kind: FileKind::Fifo, blocking: true, enter: true },
        )
    }

    #[test]
    fn unix_socket_then_pipe_is_transitive() {
        let (a, b, c) = (100, 200, 300);
        let mut d = Discovery::new(&[a]);
        let s = unix_sock();
        assert!(d.observe(&sock(1, a, &s)).edges.is_empty());
        let got = d.observe(&sock(2, b, &s));
        assert_eq!(got.edges, vec![DiscoveryEdge { from_tgid: a, to: Peer::Process(b), via: s.clone(), first_seen: 2 }]);
        assert_eq!(got.joined, vec![(b, a)]);
        assert_eq!(d.monitored(), &BTreeSet::from([a, b]));

        let p = bri_of_file(5, 77);
        d.observe(&fifo(3, b, &p));
        let got = d.observe(&fifo(4, c, &p));
        assert_eq!(got.edges[0].from_tgid, b);
        assert_eq!(got.edges[0].to, Peer::Process(c));
        assert_eq!(d.monitored(), &BTreeSet::from([a, b, c]));
        // repeat traffic does not emit again
        assert!(d.observe(&fifo(5, c, &p)).edges.is_empty());
    }

    #[test]
    fn unmonitored_first_accessor_still_links() {
        let mut d = Discovery::new(&[1]);
        let s = unix_sock();
        d.observe(&sock(1, 9, &s));
        let got = d.observe(&sock(2, 1, &s));
        assert_eq!(got.edges[0].from_tgid, 1);
        assert_eq!(got.edges[0].to, Peer::Process(9));
    }

    #[test]
    fn self_pipe_gives_no_edge() {
        let mut d = Discovery::new(&[7]);
        let p = bri_of_file(5, 1);
        assert!(d.observe(&fifo(1, 7, &p)).edges.is_empty());
        assert!(d.observe(&fifo(2, 7, &p)).edges.is_empty());
        assert_eq!(d.monitored().len(), 1);
    }

    #[test]
    fn unshared_inet_socket_is_external() {
        let mut d = Discovery::new(&[1]);
        let local = Endpoint::Inet("10.0.0.1:40000".parse().unwrap());
        let remote = Endpoint::Inet("10.0.0.9:5432".parse().unwrap());
        let bri = Bri::socket(SocketFamily::Inet4, local.clone(), remote);
        let ev = KernelEvent::new(
            5,
            ThreadRef::new(2, 1, "webui"),
            EventKind::SockAccess { bri: bri.clone(), dir: SockDir::Send, enter: true, local: Some(local) },
        );
        d.observe(&ev);
        let ext = d.external_edges();
        assert_eq!(ext.len(), 1);
        assert_eq!(ext[0].to, Peer::External("10.0.0.9:5432".into()));
        assert_eq!(ext[0].first_seen, 5);
    }
}
