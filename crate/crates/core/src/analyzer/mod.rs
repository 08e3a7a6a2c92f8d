//! Distribution-shift detection and selective thread tracking.
//!
//! Each (thread, metric, resource) combination becomes two series of
//! per-window values, one per range. Thread-scoped metrics are zero-filled
//! over every window of the range; resource-scoped metrics only have values
//! for windows in which the resource was used.
//!
//! Tracking starts from the threads that talk to inet sockets and tests
//! every metric of each newly tracked thread once. A shifted futex, pipe or
//! socket metric pulls in every other thread that used the same resource.
//! That includes the file waits of an epoll, where the pipe or socket the
//! epoll was waiting for leads to the threads writing it.
//! This repeats until no thread is added.

pub mod changepoint;
pub mod kpi;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

pub use changepoint::{mean_shift, suggest_ranges, ChangePoint};
pub use kpi::KpiSeries;
pub use stats::{distribution_shift, shift_report, Direction, ShiftReport, ShiftTest, DEFAULT_ALPHA, MIN_SAMPLES};

use crate::error::AnalyzerError;
use crate::model::{Bri, BriKind, MetricKind, MetricSample, Nanos, Subject, ThreadRef, WaitDir, NANOS_PER_SEC};
use crate::store::{MetricStore, TsRange};

/// Identifies one series of a thread.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SeriesKey {
    pub metric: MetricKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resource: Option<Bri>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<WaitDir>,
    /// For `epoll_file_wait`: the epoll the file was registered with.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoll: Option<Bri>,
}

impl SeriesKey {
    pub fn thread(metric: MetricKind) -> Self {
        SeriesKey { metric, resource: None, dir: None, epoll: None }
    }

    pub fn resource(metric: MetricKind, resource: Bri, dir: Option<WaitDir>) -> Self {
        SeriesKey { metric, resource: Some(resource), dir, epoll: None }
    }

    /// Series on a futex, pipe or socket, the ones that lead to counterparts.
    /// Includes waits on a pipe or socket registered with an epoll.
    pub fn is_ipc(&self) -> bool {
        self.resource.as_ref().is_some_and(Bri::is_ipc)
    }
}

#[derive(Debug, Default)]
struct RangeData {
    windows: Vec<Nanos>,
    per_thread: BTreeMap<u32, BTreeMap<SeriesKey, BTreeMap<Nanos, u64>>>,
    epoll_files: BTreeMap<Bri, BTreeMap<Bri, BTreeMap<Nanos, u64>>>,
}

impl RangeData {
    fn new(range: TsRange, window_ns: Nanos) -> Self {
        let mut windows = Vec::new();
        let mut w = range.start_ns.div_ceil(window_ns) * window_ns;
        while w < range.end_ns {
            windows.push(w);
            w += window_ns;
        }
        RangeData { windows, ..RangeData::default() }
    }

    fn add(&mut self, s: &MetricSample) {
        let ts = s.window.start_ns;
        match &s.subject {
            Subject::Thread(t) => {
                let key = SeriesKey { metric: s.metric, resource: s.resource.clone(), dir: s.dir, epoll: None };
                *self.per_thread.entry(t.tid).or_default().entry(key).or_default().entry(ts).or_insert(0) += s.value;
            }
            Subject::Epoll(e) => {
                if let Some(file) = &s.resource {
                    *self
                        .epoll_files
                        .entry(e.clone())
                        .or_default()
                        .entry(file.clone())
                        .or_default()
                        .entry(ts)
                        .or_insert(0) += s.value;
                }
            }
        }
    }

    fn series(&self, tid: u32, key: &SeriesKey) -> Vec<f64> {
        if key.metric == MetricKind::EpollFileWait {
            let (Some(epoll), Some(file)) = (&key.epoll, &key.resource) else { return Vec::new() };
            return self
                .epoll_files
                .get(epoll)
                .and_then(|m| m.get(file))
                .map(|v| v.values().map(|x| *x as f64).collect())
                .unwrap_or_default();
        }
        let values = self.per_thread.get(&tid).and_then(|m| m.get(key));
        if key.metric.needs_resource() {
            values.map(|v| v.values().map(|x| *x as f64).collect()).unwrap_or_default()
        } else {
            self.windows
                .iter()
                .map(|w| values.and_then(|v| v.get(w)).copied().unwrap_or(0) as f64)
                .collect()
        }
    }
}

/// A shifted series found during analysis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Flag {
    /// Tracking iteration that tested the thread (0 for full search).
    pub iteration: u32,
    pub thread: ThreadRef,
    #[serde(flatten)]
    pub key: SeriesKey,
    pub shift: ShiftReport,
}

/// Samples of both ranges, indexed for testing.
#[derive(Debug)]
pub struct AnalysisInput {
    pub baseline_range: TsRange,
    pub compare_range: TsRange,
    pub window_ns: Nanos,
    baseline: RangeData,
    compare: RangeData,
    threads: BTreeMap<u32, ThreadRef>,
    /// IPC resource -> threads that waited on, woke, read or wrote it
    touchers: BTreeMap<Bri, BTreeSet<u32>>,
    /// thread -> inet sockets it waited on, per range
    inet_users: BTreeSet<u32>,
}

fn touches(metric: MetricKind) -> bool {
    use MetricKind::*;
    matches!(
        metric,
        PipeWaitTime | PipeWaitCount | SocketWaitTime | SocketWaitCount | FutexWaitTime | FutexWaitCount | FutexWakeCount
    )
}

impl AnalysisInput {
    pub fn load(
        store: &MetricStore,
        baseline: TsRange,
        compare: TsRange,
        tgids: Option<&BTreeSet<u32>>,
    ) -> Result<Self, AnalyzerError> {
        let window_ns = store.window_ns()?.unwrap_or(NANOS_PER_SEC);
        let b = store.load_samples(Some(baseline.window()), tgids)?;
        let c = store.load_samples(Some(compare.window()), tgids)?;
        Ok(Self::from_samples(window_ns, baseline, &b, compare, &c))
    }

    pub fn from_samples(
        window_ns: Nanos,
        baseline_range: TsRange,
        baseline: &[MetricSample],
        compare_range: TsRange,
        compare: &[MetricSample],
    ) -> Self {
        let mut input = AnalysisInput {
            baseline_range,
            compare_range,
            window_ns,
            baseline: RangeData::new(baseline_range, window_ns),
            compare: RangeData::new(compare_range, window_ns),
            threads: BTreeMap::new(),
            touchers: BTreeMap::new(),
            inet_users: BTreeSet::new(),
        };
        for (samples, is_baseline) in [(baseline, true), (compare, false)] {
            for s in samples {
                if let Subject::Thread(t) = &s.subject {
                    input.threads.entry(t.tid).or_insert_with(|| t.clone());
                    if let Some(bri) = &s.resource {
                        if touches(s.metric) && s.value > 0 {
                            input.touchers.entry(bri.clone()).or_default().insert(t.tid);
                        }
                        if bri.is_inet_socket() && s.value > 0 {
                            input.inet_users.insert(t.tid);
                        }
                    }
                }
                if is_baseline {
                    input.baseline.add(s);
                } else {
                    input.compare.add(s);
                }
            }
        }
        input
    }

    pub fn threads(&self) -> impl Iterator<Item = &ThreadRef> {
        self.threads.values()
    }

    pub fn thread(&self, tid: u32) -> Option<&ThreadRef> {
        self.threads.get(&tid)
    }

    /// Threads with socket waits on inet4/inet6 connections in either range.
    pub fn entry_threads(&self) -> BTreeSet<u32> {
        self.inet_users.clone()
    }

    /// Threads that used `resource`, minus `excluding`.
    pub fn counterparts(&self, resource: &Bri, excluding: &BTreeSet<u32>) -> Result<BTreeSet<u32>, AnalyzerError> {
        if !resource.is_ipc() {
            return Err(AnalyzerError::NotAnIpcResource(resource.key()));
        }
        Ok(self
            .touchers
            .get(resource)
            .map(|set| set.difference(excluding).copied().collect())
            .unwrap_or_default())
    }

    /// Every series a thread has: the five scheduler metrics, each resource
    /// metric it recorded in either range, and the file waits of every epoll
    /// it waited on.
    pub fn series_keys(&self, tid: u32) -> BTreeSet<SeriesKey> {
        let mut keys: BTreeSet<SeriesKey> = MetricKind::SCHEDULER.iter().map(|m| SeriesKey::thread(*m)).collect();
        for data in [&self.baseline, &self.compare] {
            if let Some(rows) = data.per_thread.get(&tid) {
                keys.extend(rows.keys().filter(|k| k.resource.is_some()).cloned());
            }
        }
        let epolls: BTreeSet<Bri> = keys
            .iter()
            .filter(|k| k.metric == MetricKind::EpollWaitTime)
            .filter_map(|k| k.resource.clone())
            .collect();
        for epoll in epolls {
            for data in [&self.baseline, &self.compare] {
                if let Some(files) = data.epoll_files.get(&epoll) {
                    for file in files.keys() {
                        keys.insert(SeriesKey {
                            metric: MetricKind::EpollFileWait,
                            resource: Some(file.clone()),
                            dir: None,
                            epoll: Some(epoll.clone()),
                        });
                    }
                }
            }
        }
        keys
    }

    pub fn series(&self, tid: u32, key: &SeriesKey) -> (Vec<f64>, Vec<f64>) {
        (self.baseline.series(tid, key), self.compare.series(tid, key))
    }

    /// Tests every series of a thread.
    pub fn test_thread(&self, tid: u32, alpha: f64) -> ThreadTests {
        let mut out = ThreadTests::default();
        for key in self.series_keys(tid) {
            out.tests += 1;
            let (b, c) = self.series(tid, &key);
            match shift_report(&b, &c) {
                Ok(report) if report.is_shift(alpha) => out.flags.push((key, report)),
                Ok(_) => {}
                Err(_) => out.insufficient += 1,
            }
        }
        out
    }
}

#[derive(Debug, Default)]
pub struct ThreadTests {
    pub flags: Vec<(SeriesKey, ShiftReport)>,
    pub tests: u64,
    /// Series skipped for having fewer than the minimum samples.
    pub insufficient: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingState {
    pub track: Vec<ThreadRef>,
    pub seen: Vec<ThreadRef>,
    pub entry: Vec<ThreadRef>,
    pub flagged: Vec<Flag>,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    pub iteration: u32,
    pub scanned: Vec<u32>,
    pub flagged: usize,
    pub added: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosisReport {
    pub baseline: TsRange,
    pub compare: TsRange,
    pub alpha: f64,
    pub tracked: TrackingState,
    /// Flags ordered by iteration, thread and metric: entry points first.
    pub flagged_chain: Vec<Flag>,
    /// No shift was found beyond the entry threads; a full search may help.
    pub exhausted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hint: Option<String>,
    pub iterations: Vec<IterationTrace>,
    /// Number of series tested, bounded by threads x (16 + resources per thread).
    pub metric_tests: u64,
    pub insufficient: u64,
}

fn refs(input: &AnalysisInput, tids: &BTreeSet<u32>) -> Vec<ThreadRef> {
    tids.iter().filter_map(|t| input.thread(*t).cloned()).collect()
}

fn sort_flags(flags: &mut [Flag]) {
    flags.sort_by(|a, b| (a.iteration, a.thread.tid, &a.key).cmp(&(b.iteration, b.thread.tid, &b.key)));
}

/// Runs selective thread tracking on prepared input.
pub fn track(input: &AnalysisInput, alpha: f64) -> DiagnosisReport {
    let entry = input.entry_threads();
    let mut tracked: BTreeSet<u32> = entry.clone();
    let mut seen: BTreeSet<u32> = BTreeSet::new();
    let mut all_flags: Vec<Flag> = Vec::new();
    let mut iterations = Vec::new();
    let mut metric_tests = 0;
    let mut insufficient = 0;
    let mut iteration = 0;

    loop {
        iteration += 1;
        let pending: Vec<u32> = tracked.difference(&seen).copied().collect();
        if pending.is_empty() {
            break;
        }
        let mut flagged_now: Vec<Flag> = Vec::new();
        for tid in &pending {
            let result = input.test_thread(*tid, alpha);
            metric_tests += result.tests;
            insufficient += result.insufficient;
            let thread = input.thread(*tid).cloned().expect("tracked threads come from samples");
            flagged_now.extend(result.flags.into_iter().map(|(key, shift)| Flag {
                iteration,
                thread: thread.clone(),
                key,
                shift,
            }));
            seen.insert(*tid);
        }
        let mut new = BTreeSet::new();
        for flag in flagged_now.iter().filter(|f| f.key.is_ipc()) {
            let bri = flag.key.resource.as_ref().unwrap();
            new.extend(input.counterparts(bri, &tracked).expect("ipc resource"));
        }
        let added: Vec<u32> = new.difference(&tracked).copied().collect();
        iterations.push(IterationTrace { iteration, scanned: pending, flagged: flagged_now.len(), added: added.clone() });
        all_flags.extend(flagged_now);
        tracked.extend(added.iter().copied());
        if added.is_empty() {
            break;
        }
    }

    sort_flags(&mut all_flags);
    let non_entry_flags = all_flags.iter().any(|f| !entry.contains(&f.thread.tid));
    let hint = if entry.is_empty() {
        Some("no thread used an inet socket in the selected ranges; run a full search".to_string())
    } else if !non_entry_flags {
        Some("no shift found beyond the entry threads; a full search may reveal the cause".to_string())
    } else {
        None
    };
    DiagnosisReport {
        baseline: input.baseline_range,
        compare: input.compare_range,
        alpha,
        tracked: TrackingState {
            track: refs(input, &tracked),
            seen: refs(input, &seen),
            entry: refs(input, &entry),
            flagged: all_flags.clone(),
            iteration: iterations.len() as u32,
        },
        flagged_chain: all_flags,
        exhausted: !non_entry_flags,
        hint,
        iterations,
        metric_tests,
        insufficient,
    }
}

/// Tests every series of every thread. Flags are sorted by absolute effect
/// size, largest first.
pub fn full_search_input(input: &AnalysisInput, alpha: f64) -> Vec<Flag> {
    let mut flags = Vec::new();
    for thread in input.threads() {
        for (key, shift) in input.test_thread(thread.tid, alpha).flags {
            flags.push(Flag { iteration: 0, thread: thread.clone(), key, shift });
        }
    }
    flags.sort_by(|a, b| {
        b.shift
            .cohens_d
            .abs()
            .total_cmp(&a.shift.cohens_d.abs())
            .then_with(|| (a.thread.tid, &a.key).cmp(&(b.thread.tid, &b.key)))
    });
    flags
}

pub fn selective_thread_tracking(
    store: &MetricStore,
    baseline: TsRange,
    compare: TsRange,
    tgids: Option<&BTreeSet<u32>>,
    alpha: f64,
) -> Result<DiagnosisReport, AnalyzerError> {
    let input = AnalysisInput::load(store, baseline, compare, tgids)?;
    Ok(track(&input, alpha))
}

pub fn full_search(
    store: &MetricStore,
    baseline: TsRange,
    compare: TsRange,
    tgids: Option<&BTreeSet<u32>>,
    alpha: f64,
) -> Result<Vec<Flag>, AnalyzerError> {
    let input = AnalysisInput::load(store, baseline, compare, tgids)?;
    Ok(full_search_input(&input, alpha))
}

/// Threads with inet socket waits in `range`.
pub fn detect_entry_threads(
    store: &MetricStore,
    range: TsRange,
    tgids: Option<&BTreeSet<u32>>,
) -> Result<Vec<ThreadRef>, AnalyzerError> {
    let mut out: BTreeMap<u32, ThreadRef> = BTreeMap::new();
    for s in store.load_samples(Some(range.window()), tgids)? {
        let inet = s.resource.as_ref().is_some_and(Bri::is_inet_socket);
        let socket_metric = matches!(s.metric, MetricKind::SocketWaitTime | MetricKind::SocketWaitCount);
        if let (Subject::Thread(t), true, true, true) = (&s.subject, inet, socket_metric, s.value > 0) {
            out.entry(t.tid).or_insert_with(|| t.clone());
        }
    }
    Ok(out.into_values().collect())
}

/// Threads that waited on, woke, read or wrote `resource` in `range`.
pub fn counterparts(
    store: &MetricStore,
    range: TsRange,
    resource: &Bri,
    excluding: &BTreeSet<u32>,
) -> Result<Vec<ThreadRef>, AnalyzerError> {
    if !resource.is_ipc() {
        return Err(AnalyzerError::NotAnIpcResource(resource.key()));
    }
    let mut out: BTreeMap<u32, ThreadRef> = BTreeMap::new();
    for s in store.load_samples(Some(range.window()), None)? {
        if let Subject::Thread(t) = &s.subject {
            if s.resource.as_ref() == Some(resource) && touches(s.metric) && s.value > 0 && !excluding.contains(&t.tid) {
                out.entry(t.tid).or_insert_with(|| t.clone());
            }
        }
    }
    Ok(out.into_values().collect())
}

/// Kind of resource a flag points at, if any.
pub fn flag_resource_kind(flag: &Flag) -> Option<BriKind> {
    flag.key.resource.as_ref().map(Bri::kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeWindow;

    const S: u64 = NANOS_PER_SEC;

    fn sample(w: u64, tid: u32, metric: MetricKind, resource: Option<Bri>, value: u64) -> MetricSample {
        MetricSample {
            window: TimeWindow { start_ns: w * S, end_ns: (w + 1) * S },
            subject: Subject::Thread(ThreadRef::new(tid, 1, format!("t{tid}"))),
            metric,
            resource,
            dir: None,
            value,
        }
    }

    fn ranges() -> (TsRange, TsRange) {
        (TsRange::new(0, 10 * S).unwrap(), TsRange::new(10 * S, 20 * S).unwrap())
    }

    #[test]
    fn thread_series_are_zero_filled_resource_series_are_not() {
        let f = Bri::futex(1, 8, false);
        let samples = vec![sample(2, 7, MetricKind::Runtime, None, 5), sample(3, 7, MetricKind::FutexWaitTime, Some(f.clone()), 9)];
        let (b, c) = ranges();
        let input = AnalysisInput::from_samples(S, b, &samples, c, &[]);
        let (rb, rc) = input.series(7, &SeriesKey::thread(MetricKind::Runtime));
        assert_eq!(rb.len(), 10);
        assert_eq!(rb.iter().sum::<f64>(), 5.0);
        assert_eq!(rc, vec![0.0; 10]);
        let (fb, fc) = input.series(7, &SeriesKey::resource(MetricKind::FutexWaitTime, f, None));
        assert_eq!(fb, vec![9.0]);
        assert!(fc.is_empty());
    }

    #[test]
    fn counterparts_exclude_and_reject_devices() {
        let f = Bri::futex(1, 8, false);
        let samples = vec![
            sample(0, 4, MetricKind::FutexWaitTime, Some(f.clone()), 9),
            sample(0, 3, MetricKind::FutexWakeCount, Some(f.clone()), 1),
        ];
        let (b, c) = ranges();
        let input = AnalysisInput::from_samples(S, b, &samples, c, &[]);
        assert_eq!(input.counterparts(&f, &BTreeSet::from([4])).unwrap(), BTreeSet::from([3]));
        assert!(input.counterparts(&Bri::futex(1, 99, false), &BTreeSet::new()).unwrap().is_empty());
        assert!(matches!(
            input.counterparts(&Bri::BlockDev { major: 8, minor: 0 }, &BTreeSet::new()),
            Err(AnalyzerError::NotAnIpcResource(_))
        ));
    }

    #[test]
    fn no_entry_threads_means_exhausted() {
        let samples: Vec<_> = (0..20).map(|w| sample(w, 1, MetricKind::Runtime, None, 10)).collect();
        let (b, c) = ranges();
        let input = AnalysisInput::from_samples(S, b, &samples[..10], c, &samples[10..]);
        let report = track(&input, DEFAULT_ALPHA);
        assert!(report.exhausted);
        assert!(report.hint.is_some());
        assert!(report.tracked.track.is_empty());
    }
}
