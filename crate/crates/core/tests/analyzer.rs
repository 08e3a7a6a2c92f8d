use std::collections::BTreeSet;

use prismlike_core::analyzer::{
    self, distribution_shift, full_search_input, shift_report, suggest_ranges, track, AnalysisInput, KpiSeries,
    SeriesKey, DEFAULT_ALPHA,
};
use prismlike_core::model::{BriKind, MetricKind, WaitDir};
use prismlike_core::scenario::{self, Scenario};
use prismlike_core::store::{MetricStore, TsRange};
use prismlike_core::AnalyzerError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const S: u64 = 1_000_000_000;

fn normal(seed: u64, mean: f64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(mean, 1.0).unwrap();
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

/// U by counting pairs, half a point per tie.
fn brute_force_u(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

fn two_pass_cohens_d(b: &[f64], c: &[f64]) -> f64 {
    let m = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let ss = |x: &[f64]| {
        let mx = m(x);
        x.iter().map(|v| (v - mx).powi(2)).sum::<f64>()
    };
    let pooled = ((ss(b) + ss(c)) / (b.len() + c.len() - 2) as f64).sqrt();
    (m(c) - m(b)) / pooled
}

#[test]
fn unit_shift_of_a_normal_is_detected() {
    let b = normal(1, 0.0, 200);
    let c = normal(2, 1.0, 200);
    let r = shift_report(&b, &c).unwrap();
    assert_eq!(r.mwu_u, brute_force_u(&b, &c));
    assert!(r.mwu_p < 1e-3, "p = {}", r.mwu_p);
    assert!((r.cohens_d - 1.0).abs() <= 0.2, "d = {}", r.cohens_d);
    assert!((r.cohens_d - two_pass_cohens_d(&b, &c)).abs() < 1e-9);
    assert!(distribution_shift(&b, &c, DEFAULT_ALPHA).unwrap().is_some());
    assert!(distribution_shift(&b, &b, DEFAULT_ALPHA).unwrap().is_none());
}

#[test]
fn rank_sum_matches_pair_counting_with_ties() {
    let b: Vec<f64> = normal(3, 0.0, 60).iter().map(|v| v.round()).collect();
    let c: Vec<f64> = normal(4, 0.3, 45).iter().map(|v| v.round()).collect();
    let r = shift_report(&b, &c).unwrap();
    assert_eq!(r.mwu_u, brute_force_u(&b, &c));
}

fn input(sc: &Scenario) -> AnalysisInput {
    let store = sc.replay().unwrap();
    AnalysisInput::load(&store, sc.baseline, sc.compare, None).unwrap()
}

fn tids(refs: &[prismlike_core::model::ThreadRef]) -> BTreeSet<u32> {
    refs.iter().map(|t| t.tid).collect()
}

fn set(sc: &Scenario, names: &[&str]) -> BTreeSet<u32> {
    names.iter().map(|n| sc.tid(n)).collect()
}

#[test]
fn entry_threads_are_the_inet_socket_users() {
    let sc = scenario::mysql();
    let store = sc.replay().unwrap();
    let all = TsRange::new(0, 2 * scenario::PHASE * S).unwrap();
    let entry = analyzer::detect_entry_threads(&store, all, None).unwrap();
    assert_eq!(tids(&entry), set(&sc, &["t3", "t4", "t6"]));
    assert!(!tids(&entry).contains(&sc.tid("t5")), "unix socket users are not entry points");

    let lock = scenario::lock();
    let lock_store = lock.replay().unwrap();
    let none: BTreeSet<u32> = [lock.tid("t1"), lock.tid("t2")].into();
    let entry = analyzer::detect_entry_threads(&lock_store, all, Some(&[100].into())).unwrap();
    assert_eq!(tids(&entry), set(&lock, &["t4"]));
    let pipe_only = prismlike_core::store::MetricStore::in_memory().unwrap();
    assert!(analyzer::detect_entry_threads(&pipe_only, all, None).unwrap().is_empty());
    assert!(none.is_disjoint(&tids(&entry)));
}

#[test]
fn counterparts_of_shared_resources() {
    let sc = scenario::lock();
    let store = sc.replay().unwrap();
    let all = TsRange::new(0, 2 * scenario::PHASE * S).unwrap();
    let got = analyzer::counterparts(&store, all, sc.resource("f1"), &set(&sc, &["t4"])).unwrap();
    assert_eq!(tids(&got), set(&sc, &["t3"]));
    let got = analyzer::counterparts(&store, all, sc.resource("p1"), &BTreeSet::new()).unwrap();
    assert_eq!(tids(&got), set(&sc, &["t1", "t2"]));

    let untouched = prismlike_core::model::Bri::futex(100, 0xdead0, false);
    assert!(analyzer::counterparts(&store, all, &untouched, &BTreeSet::new()).unwrap().is_empty());

    let chain = scenario::chain();
    let e = analyzer::counterparts(&store, all, chain.resource("dev"), &BTreeSet::new()).unwrap_err();
    assert!(matches!(e, AnalyzerError::NotAnIpcResource(_)));
}

#[test]
fn lock_contention_tracks_the_lock_holder() {
    let sc = scenario::lock();
    let report = track(&input(&sc), DEFAULT_ALPHA);
    assert_eq!(tids(&report.tracked.track), set(&sc, &["t3", "t4"]));
    assert_eq!(tids(&report.tracked.entry), set(&sc, &["t4"]));
    let first = &report.flagged_chain[0];
    assert_eq!(first.iteration, 1);
    assert_eq!(first.thread.tid, sc.tid("t4"));
    assert_eq!(first.key, SeriesKey::resource(MetricKind::FutexWaitTime, sc.resource("f1").clone(), None));
    let t3: BTreeSet<MetricKind> =
        report.flagged_chain.iter().filter(|f| f.thread.tid == sc.tid("t3")).map(|f| f.key.metric).collect();
    assert!(t3.contains(&MetricKind::Runtime));
    assert!(report.flagged_chain.iter().filter(|f| f.thread.tid == sc.tid("t3")).all(|f| f.iteration == 2));
    assert!(!report.exhausted);
    assert!(report.hint.is_none());
}

#[test]
fn chain_adds_one_thread_per_iteration() {
    let sc = scenario::chain();
    let report = track(&input(&sc), DEFAULT_ALPHA);
    let added: Vec<Vec<u32>> = report.iterations.iter().map(|i| i.added.clone()).collect();
    assert_eq!(added, vec![vec![sc.tid("mid")], vec![sc.tid("worker")], vec![]]);
    assert_eq!(report.tracked.iteration, 3);
    let worker_block = report
        .flagged_chain
        .iter()
        .find(|f| f.thread.tid == sc.tid("worker") && f.key.metric == MetricKind::BlockTime)
        .expect("worker blocks on the device");
    assert_eq!(worker_block.iteration, 3);
}

#[test]
fn kafka_chain_leads_from_epoll_to_disk() {
    let sc = scenario::kafka();
    let report = track(&input(&sc), DEFAULT_ALPHA);
    assert!(!report.exhausted);
    let t9 = sc.tid("t9");
    let pos = |pred: &dyn Fn(&analyzer::Flag) -> bool| report.flagged_chain.iter().position(pred).expect("flag");
    let epoll = pos(&|f| f.thread.tid == t9 && f.key.metric == MetricKind::EpollWaitTime);
    let file = pos(&|f| {
        f.thread.tid == t9
            && f.key.metric == MetricKind::EpollFileWait
            && f.key.resource.as_ref() == Some(sc.resource("p1"))
    });
    let block = pos(&|f| f.thread.tid == sc.tid("t1") && f.key.metric == MetricKind::BlockTime);
    assert_eq!(report.flagged_chain[epoll].key.resource.as_ref(), Some(sc.resource("e1")));
    assert!(epoll < block && file < block);
    for n in 1..=8 {
        let name = format!("t{n}");
        assert!(tids(&report.tracked.track).contains(&sc.tid(&name)));
    }
    assert!(!tids(&report.tracked.track).contains(&sc.tid("backup")));
    // the second network thread is an entry point but stays quiet
    assert!(tids(&report.tracked.entry).contains(&sc.tid("t10")));
    assert!(!report.flagged_chain.iter().any(|f| f.thread.tid == sc.tid("t10")));
}

#[test]
fn teastore_points_at_the_external_database() {
    let sc = scenario::teastore();
    let report = track(&input(&sc), DEFAULT_ALPHA);
    let resources: Vec<_> = report.flagged_chain.iter().filter_map(|f| f.key.resource.clone()).collect();
    assert_eq!(resources, vec![sc.resource("db").clone()]);
    let flag = report.flagged_chain.iter().find(|f| f.key.resource.is_some()).unwrap();
    assert_eq!(flag.thread.tid, sc.tid("t2"));
    assert_eq!(flag.key.dir, Some(WaitDir::Read));
    assert_eq!(analyzer::flag_resource_kind(flag), Some(BriKind::Socket));
}

#[test]
fn identical_ranges_flag_nothing() {
    for sc in scenario::all() {
        let store = sc.replay().unwrap();
        let input = AnalysisInput::load(&store, sc.baseline, sc.baseline, None).unwrap();
        let report = track(&input, DEFAULT_ALPHA);
        assert!(report.flagged_chain.is_empty(), "{}", sc.name);
        assert_eq!(tids(&report.tracked.track), tids(&report.tracked.entry), "{}", sc.name);
        assert!(report.exhausted);
        assert!(report.hint.is_some());
    }
}

#[test]
fn full_search_contains_selective_flags() {
    for sc in scenario::all() {
        let input = input(&sc);
        let report = track(&input, DEFAULT_ALPHA);
        let full = full_search_input(&input, DEFAULT_ALPHA);
        let full_keys: BTreeSet<(u32, SeriesKey)> = full.iter().map(|f| (f.thread.tid, f.key.clone())).collect();
        for f in &report.flagged_chain {
            assert!(full_keys.contains(&(f.thread.tid, f.key.clone())), "{}: {:?}", sc.name, f.key);
        }
        assert!(full.windows(2).all(|w| w[0].shift.cohens_d.abs() >= w[1].shift.cohens_d.abs()), "{}", sc.name);
    }
}

/// Returns whether tracking went past the entry threads.
fn check_properties(seed: u64, store: &MetricStore, b: TsRange, c: TsRange) -> bool {
    let input = AnalysisInput::load(store, b, c, None).unwrap();
    let n = input.threads().count();
    let report = track(&input, DEFAULT_ALPHA);

    let track_set = tids(&report.tracked.track);
    let full: BTreeSet<(u32, SeriesKey)> =
        full_search_input(&input, DEFAULT_ALPHA).into_iter().map(|f| (f.thread.tid, f.key)).collect();
    for f in &report.flagged_chain {
        assert!(full.contains(&(f.thread.tid, f.key.clone())), "seed {seed}");
        assert!(track_set.contains(&f.thread.tid), "seed {seed}");
    }
    assert!(report.iterations.len() <= n.max(1), "seed {seed}");

    let mut scanned = BTreeSet::new();
    for it in &report.iterations {
        for tid in &it.scanned {
            assert!(scanned.insert(*tid), "seed {seed}: {tid} scanned twice");
        }
    }
    assert_eq!(scanned, track_set, "seed {seed}");

    let expected: u64 = scanned.iter().map(|t| input.series_keys(*t).len() as u64).sum();
    assert_eq!(report.metric_tests, expected, "seed {seed}");
    for tid in &scanned {
        let keys = input.series_keys(*tid);
        let k = keys.iter().filter(|k| k.resource.is_some()).count();
        assert!(keys.len() <= 16 + k, "seed {seed}");
    }

    let strict = track(&input, DEFAULT_ALPHA / 10.0);
    let loose: BTreeSet<(u32, SeriesKey)> =
        report.flagged_chain.iter().map(|f| (f.thread.tid, f.key.clone())).collect();
    for f in &strict.flagged_chain {
        assert!(loose.contains(&(f.thread.tid, f.key.clone())), "seed {seed}: lowering alpha added a flag");
    }
    assert!(tids(&strict.tracked.track).is_subset(&track_set), "seed {seed}");
    track_set.len() > report.tracked.entry.len()
}

#[test]
fn tracking_properties_on_random_stores() {
    let mut expanded = 0;
    for seed in 0..100 {
        let (store, b, c) = scenario::random_store(seed).unwrap();
        expanded += check_properties(seed, &store, b, c) as u32;
    }
    assert!(expanded >= 10, "only {expanded} stores needed expansion");
}

#[test]
fn tracking_properties_on_fixtures() {
    for sc in scenario::all() {
        let store = sc.replay().unwrap();
        check_properties(0, &store, sc.baseline, sc.compare);
    }
}

#[test]
fn reports_serialize_deterministically() {
    let sc = scenario::kafka();
    let a = serde_json::to_string(&track(&input(&sc), DEFAULT_ALPHA)).unwrap();
    let b = serde_json::to_string(&track(&input(&sc), DEFAULT_ALPHA)).unwrap();
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    let flag = &v["flagged_chain"][0];
    for field in ["iteration", "thread", "metric", "shift"] {
        assert!(flag.get(field).is_some(), "flag lacks {field}");
    }
    assert!(v.get("hint").is_none());
}

#[test]
fn kpi_change_point_splits_the_ranges() {
    let mut csv = String::from("ts,latency_ms\n");
    for s in 0..20 {
        let v = if s < 12 { 10.0 + (s % 3) as f64 } else { 80.0 + (s % 2) as f64 };
        csv.push_str(&format!("{s},{v}\n"));
    }
    let kpi = KpiSeries::from_csv("latency", &csv).unwrap();
    let (b, c, cp) = suggest_ranges(&kpi, S).unwrap();
    assert_eq!(cp.ts_ns, 12 * S);
    assert_eq!(b, TsRange::new(0, 12 * S).unwrap());
    assert_eq!(c.start_ns, 12 * S);
    assert!(cp.after_mean > cp.before_mean);
}
