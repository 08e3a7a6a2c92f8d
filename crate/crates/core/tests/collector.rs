mod common;

use std::collections::BTreeSet;
use std::fs;
use std::sync::atomic::AtomicBool;

use common::fixtures;
use prismlike_core::collector::live::ingest_stream;
use prismlike_core::collector::maps::MapSnapshot;
use prismlike_core::collector::wire::encode_stream;
use prismlike_core::collector::{run_session, Session, SessionConfig, DEFAULT_MAX_BRIS_PER_THREAD};
use prismlike_core::engine::run_events;
use prismlike_core::graph::build_process_graph;
use prismlike_core::model::{
    bri_of_file, Bri, Endpoint, EventKind, FileKind, IoDir, KernelEvent, MetricSample, Peer, SockDir, SocketFamily,
    ThreadRef, NANOS_PER_SEC,
};
use prismlike_core::scenario;
use prismlike_core::store::{MetricStore, TABLES};
use prismlike_core::trace::read_trace_file;
use prismlike_core::{CollectorError, TraceError};

fn sorted(mut samples: Vec<MetricSample>) -> Vec<String> {
    let mut out: Vec<String> = samples.drain(..).map(|s| serde_json::to_string(&s).unwrap()).collect();
    out.sort();
    out
}

#[test]
fn empty_trace_gives_empty_valid_store() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("empty.ndjson");
    fs::write(&trace, "").unwrap();
    let db = dir.path().join("out.db3");
    let summary = run_session(&SessionConfig::replay(&trace, &db)).unwrap();
    assert_eq!(summary.windows, 0);
    assert_eq!(summary.threads, 0);
    let store = MetricStore::open_read_only(&db).unwrap();
    for table in TABLES.iter().filter(|t| **t != "session_meta") {
        assert_eq!(store.row_count(table).unwrap(), 0, "{table}");
    }
    assert_eq!(store.window_ns().unwrap(), Some(NANOS_PER_SEC));
}

#[test]
fn malformed_line_is_reported_by_number() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("bad.ndjson");
    let good = r#"{"ts":1,"tid":1,"tgid":1,"comm":"a","kind":"sched_switch_in"}"#;
    let mut text = String::new();
    for _ in 0..6 {
        text.push_str(good);
        text.push('\n');
    }
    text.push_str("{\"ts\": oops}\n");
    fs::write(&trace, text).unwrap();
    let err = run_session(&SessionConfig::replay(&trace, dir.path().join("o.db3"))).unwrap_err();
    match &err {
        CollectorError::Trace(TraceError::Parse { line, .. }) => assert_eq!(*line, 7),
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("line 7"));
}

#[test]
fn unknown_kind_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("bad.ndjson");
    fs::write(&trace, "{\"ts\":1,\"tid\":1,\"tgid\":1,\"comm\":\"a\",\"kind\":\"teleport\"}\n").unwrap();
    assert!(run_session(&SessionConfig::replay(&trace, dir.path().join("o.db3"))).is_err());
}

/// Probe output converted to the wire format and ingested through the live
/// path yields the same samples as replaying the trace.
#[test]
fn live_loopback_matches_replay() {
    for name in ["lock", "kafka"] {
        let sc = scenario::by_name(name).unwrap();
        let bytes = encode_stream(sc.trace.cpus, &sc.trace.events).unwrap();
        let store = MetricStore::in_memory().unwrap();
        let mut session = Session::new(store, &sc.bootstrap, NANOS_PER_SEC, None, DEFAULT_MAX_BRIS_PER_THREAD).unwrap();
        let stop = AtomicBool::new(false);
        ingest_stream(std::io::Cursor::new(bytes), &mut session, 50_000_000, &stop, |_| {}).unwrap();
        let (live_summary, live) = session.finish().unwrap();

        let (replay_summary, replayed) = sc.replay_into(MetricStore::in_memory().unwrap()).unwrap();
        assert_eq!(live_summary.windows, replay_summary.windows);
        assert_eq!(live_summary.late_events, 0);
        assert_eq!(sorted(live.load_samples(None, None).unwrap()), sorted(replayed.load_samples(None, None).unwrap()));
        assert_eq!(live.cpus().unwrap(), Some(8));
    }
}

/// Per-window kernel map snapshots decode back to the engine's samples.
#[test]
fn map_snapshots_round_trip_every_window() {
    let sc = scenario::kafka();
    for batch in run_events(NANOS_PER_SEC, &sc.trace.events).unwrap() {
        let raw = MapSnapshot::from_batch(&batch).encode().unwrap();
        let decoded = MapSnapshot::decode(&raw).unwrap().to_samples(batch.window.start_ns, NANOS_PER_SEC).unwrap();
        assert_eq!(sorted(decoded), sorted(batch.samples.clone()));
    }
}

fn ev(ts: u64, tid: u32, tgid: u32, kind: EventKind) -> KernelEvent {
    KernelEvent::new(ts, ThreadRef::new(tid, tgid, format!("p{tgid}")), kind)
}

#[test]
fn transitive_discovery_is_stored() {
    let sock = unix_socket();
    let pipe = bri_of_file(12, 99);
    let events = vec![
        ev(10, 1, 1, EventKind::SockAccess { bri: sock.0.clone(), dir: SockDir::Send, enter: true, local: Some(sock.1.clone()) }),
        ev(20, 2, 2, EventKind::SockAccess { bri: sock.0.clone(), dir: SockDir::Recv, enter: true, local: Some(sock.2.clone()) }),
        ev(30, 2, 2, EventKind::VfsAccess { bri: pipe.clone(), dir: IoDir::Write, file_kind: FileKind::Fifo, blocking: true, enter: true }),
        ev(40, 3, 3, EventKind::VfsAccess { bri: pipe.clone(), dir: IoDir::Read, file_kind: FileKind::Fifo, blocking: true, enter: true }),
        ev(50, 4, 4, EventKind::SchedSwitchIn),
    ];
    let mut session = Session::new(MetricStore::in_memory().unwrap(), &[1], NANOS_PER_SEC, None, 128).unwrap();
    let mut joined = Vec::new();
    for e in &events {
        joined.extend(session.ingest(e).unwrap());
    }
    assert_eq!(joined, vec![2, 3]);
    let (summary, store) = session.finish().unwrap();
    assert_eq!(summary.discovery_edges, 2);
    assert_eq!(summary.processes, 3);
    let edges: Vec<(u32, Peer)> = store.discovery_edges().unwrap().into_iter().map(|e| (e.from_tgid, e.to)).collect();
    assert_eq!(edges, vec![(1, Peer::Process(2)), (2, Peer::Process(3))]);
    let tgids: BTreeSet<u32> = store.processes().unwrap().iter().map(|p| p.tgid).collect();
    assert_eq!(tgids, BTreeSet::from([1, 2, 3]));
    let graph = build_process_graph(&store, None).unwrap();
    let adj = graph.adjacency();
    assert_eq!(adj["tgid:1"], BTreeSet::from(["tgid:2".to_string()]));
    assert_eq!(adj["tgid:2"], BTreeSet::from(["tgid:3".to_string()]));
}

fn unix_socket() -> (Bri, Endpoint, Endpoint) {
    let a = Endpoint::parse(SocketFamily::Unix, "/run/a.sock").unwrap();
    let b = Endpoint::parse(SocketFamily::Unix, "ino:8:77").unwrap();
    (Bri::socket(SocketFamily::Unix, a.clone(), b.clone()), a, b)
}

#[test]
fn committed_trace_parses_to_generator_events() {
    let sc = scenario::lock();
    let trace = read_trace_file(&fixtures::trace_path("lock")).unwrap();
    assert_eq!(trace, sc.trace);
}

#[test]
fn monitored_set_only_grows() {
    let sc = scenario::kafka();
    let mut session = Session::new(MetricStore::in_memory().unwrap(), &sc.bootstrap, NANOS_PER_SEC, None, 128).unwrap();
    let mut previous: Vec<u32> = session.monitored();
    for e in &sc.trace.events {
        session.ingest(e).unwrap();
        let now = session.monitored();
        assert!(previous.iter().all(|t| now.contains(t)));
        previous = now;
    }
    assert!(!session.is_monitored(900));
}
