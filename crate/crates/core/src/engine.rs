//! Folds an ordered stream of kernel events into per-window metrics.
//!
//! Two accounting rules apply:
//!
//! * Scheduler state (runtime, rq_time, sleep_time, block_time, iowait_time)
//!   is continuous. Time is split at window boundaries so every window gets
//!   the portion of a state that elapsed inside it.
//! * Waits (pipe, socket, poll/select, epoll, futex) are measured by paired
//!   enter/exit events and attributed entirely to the window in which the
//!   wait completes, the same rule the in-kernel aggregation follows.
//!
//! A thread's scheduler state is unknown until its first scheduler event.
//! At end of stream open state time is closed at the last event timestamp.
//! Exits without a matching enter are dropped and counted.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::error::EngineError;
use crate::model::{
    Bri, BriKind, EpollAction, EventKind, FileKind, FutexOp, IoDir, KernelEvent, MetricKind,
    MetricSample, Nanos, NextState, SockDir, Subject, ThreadRef, TimeWindow, WaitDir,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedState {
    Running,
    Runnable,
    Sleep,
    Block,
}

#[derive(Debug, Clone, Copy)]
pub struct ThreadSchedState {
    pub current: SchedState,
    pub since: Nanos,
    pub in_iowait: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum WaitClass {
    Vfs,
    Sock,
    Poll,
    Epoll,
    Futex,
}

#[derive(Debug, Clone)]
enum OpenWait {
    Vfs { bri: Bri, dir: IoDir, counted: bool },
    Sock { bri: Bri, dir: SockDir },
    Poll { bris: Vec<Bri> },
    Epoll { epoll: Bri, pending: BTreeMap<Bri, Nanos> },
    Futex { key: Bri, op: FutexOp },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum SubjectKey {
    Thread(u32),
    Epoll(Bri),
}

type CounterKey = (SubjectKey, MetricKind, Option<Bri>, Option<WaitDir>);

/// Counters describing events the engine could not account for.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EngineDiagnostics {
    pub events: u64,
    /// Exit or switch-in events with no matching enter.
    pub orphans: u64,
    /// Enter events that replaced a still-open wait of the same class.
    pub replaced_enters: u64,
}

/// Samples for one closed window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowBatch {
    pub window: TimeWindow,
    pub samples: Vec<MetricSample>,
}

pub struct MetricEngine {
    window_ns: Nanos,
    current: Option<TimeWindow>,
    last_ts: Option<Nanos>,
    threads: HashMap<u32, ThreadRef>,
    sched: HashMap<u32, ThreadSchedState>,
    open: HashMap<(u32, WaitClass), (Nanos, OpenWait)>,
    interest: HashMap<Bri, BTreeMap<Bri, Nanos>>,
    counters: BTreeMap<CounterKey, u64>,
    diagnostics: EngineDiagnostics,
}

impl MetricEngine {
    pub fn new(window_ns: Nanos) -> Self {
        assert!(window_ns > 0, "window length must be positive");
        MetricEngine {
            window_ns,
            current: None,
            last_ts: None,
            threads: HashMap::new(),
            sched: HashMap::new(),
            open: HashMap::new(),
            interest: HashMap::new(),
            counters: BTreeMap::new(),
            diagnostics: EngineDiagnostics::default(),
        }
    }

    pub fn window_ns(&self) -> Nanos {
        self.window_ns
    }

    pub fn diagnostics(&self) -> &EngineDiagnostics {
        &self.diagnostics
    }

    pub fn thread(&self, tid: u32) -> Option<&ThreadRef> {
        self.threads.get(&tid)
    }

    pub fn sched_state(&self, tid: u32) -> Option<ThreadSchedState> {
        self.sched.get(&tid).copied()
    }

    /// Registered interest list of an epoll object.
    pub fn interest_list(&self, epoll: &Bri) -> BTreeSet<Bri> {
        self.interest
            .get(epoll)
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Applies one event. Windows that end at or before the event's
    /// timestamp are closed first and returned.
    pub fn observe(&mut self, event: &KernelEvent) -> Result<Vec<WindowBatch>, EngineError> {
        if let Some(last) = self.last_ts {
            if event.ts < last {
                return Err(EngineError::OrderViolation { ts: event.ts, last });
            }
        }
        let flushed = self.flush_until(event.ts);
        self.last_ts = Some(event.ts);
        self.diagnostics.events += 1;
        self.threads
            .entry(event.thread.tid)
            .or_insert_with(|| event.thread.clone());
        self.apply(event);
        Ok(flushed)
    }

    /// Closes every window whose end is at or before `ts`.
    pub fn flush_until(&mut self, ts: Nanos) -> Vec<WindowBatch> {
        let mut out = Vec::new();
        match self.current {
            None => self.current = Some(TimeWindow::containing(ts, self.window_ns)),
            Some(mut window) => {
                while ts >= window.end_ns {
                    out.push(self.flush(window));
                    window = window.next();
                }
                self.current = Some(window);
            }
        }
        out
    }

    /// Closes the last window at end of stream.
    pub fn finish(&mut self) -> Vec<WindowBatch> {
        let (Some(window), Some(last)) = (self.current.take(), self.last_ts) else {
            return Vec::new();
        };
        let tids: Vec<u32> = self.sched.keys().copied().collect();
        for tid in tids {
            self.accrue_state(tid, last);
        }
        vec![self.emit(window)]
    }

    fn flush(&mut self, window: TimeWindow) -> WindowBatch {
        let tids: Vec<u32> = self.sched.keys().copied().collect();
        for tid in tids {
            self.accrue_state(tid, window.end_ns);
        }
        self.emit(window)
    }

    fn emit(&mut self, window: TimeWindow) -> WindowBatch {
        let counters = std::mem::take(&mut self.counters);
        let samples = counters
            .into_iter()
            .filter(|(_, v)| *v > 0)
            .map(|((subject, metric, resource, dir), value)| MetricSample {
                window,
                subject: match subject {
                    SubjectKey::Thread(tid) => Subject::Thread(self.threads[&tid].clone()),
                    SubjectKey::Epoll(bri) => Subject::Epoll(bri),
                },
                metric,
                resource,
                dir,
                value,
            })
            .collect();
        WindowBatch { window, samples }
    }

    fn add(&mut self, key: CounterKey, value: u64) {
        *self.counters.entry(key).or_insert(0) += value;
    }

    fn add_thread(&mut self, tid: u32, metric: MetricKind, res: Option<Bri>, dir: Option<WaitDir>, v: u64) {
        self.add((SubjectKey::Thread(tid), metric, res, dir), v);
    }

    /// Accrues the thread's current state up to `until` and moves `since`.
    fn accrue_state(&mut self, tid: u32, until: Nanos) {
        let Some(state) = self.sched.get_mut(&tid) else {
            return;
        };
        let elapsed = until.saturating_sub(state.since);
        let snapshot = *state;
        state.since = state.since.max(until);
        if elapsed == 0 {
            return;
        }
        let metric = match snapshot.current {
            SchedState::Running => MetricKind::Runtime,
            SchedState::Runnable => MetricKind::RqTime,
            SchedState::Sleep => MetricKind::SleepTime,
            SchedState::Block => MetricKind::BlockTime,
        };
        self.add_thread(tid, metric, None, None, elapsed);
        if snapshot.current == SchedState::Block && snapshot.in_iowait {
            self.add_thread(tid, MetricKind::IowaitTime, None, None, elapsed);
        }
    }

    fn set_state(&mut self, tid: u32, ts: Nanos, current: SchedState, in_iowait: bool) {
        self.accrue_state(tid, ts);
        self.sched.insert(
            tid,
            ThreadSchedState {
                current,
                since: ts,
                in_iowait: in_iowait && current == SchedState::Block,
            },
        );
    }

    fn open_wait(&mut self, tid: u32, class: WaitClass, ts: Nanos, wait: OpenWait) {
        if self.open.insert((tid, class), (ts, wait)).is_some() {
            self.diagnostics.replaced_enters += 1;
        }
    }

    fn close_wait(&mut self, tid: u32, class: WaitClass) -> Option<(Nanos, OpenWait)> {
        let found = self.open.remove(&(tid, class));
        if found.is_none() {
            self.diagnostics.orphans += 1;
        }
        found
    }

    fn apply(&mut self, event: &KernelEvent) {
        let ts = event.ts;
        let tid = event.thread.tid;
        match &event.kind {
            EventKind::SchedSwitchOut { next_state, in_iowait } => {
                let next = match next_state {
                    NextState::Running | NextState::Runnable => SchedState::Runnable,
                    NextState::Sleep => SchedState::Sleep,
                    NextState::Block => SchedState::Block,
                    NextState::Dead => {
                        self.accrue_state(tid, ts);
                        self.sched.remove(&tid);
                        return;
                    }
                };
                self.set_state(tid, ts, next, *in_iowait);
            }
            EventKind::SchedSwitchIn => {
                if !self.sched.contains_key(&tid) {
                    self.diagnostics.orphans += 1;
                }
                self.set_state(tid, ts, SchedState::Running, false);
            }
            EventKind::SchedWakeup => match self.sched.get(&tid).map(|s| s.current) {
                Some(SchedState::Sleep | SchedState::Block) | None => {
                    self.set_state(tid, ts, SchedState::Runnable, false)
                }
                Some(SchedState::Running | SchedState::Runnable) => {}
            },
            EventKind::FutexEnter { uaddr, op, shared, .. } => {
                let key = Bri::futex(event.thread.tgid, *uaddr, *shared);
                self.open_wait(tid, WaitClass::Futex, ts, OpenWait::Futex { key, op: *op });
            }
            EventKind::FutexExit { result } => {
                if let Some((start, OpenWait::Futex { key, op })) = self.close_wait(tid, WaitClass::Futex) {
                    match op {
                        FutexOp::Wait => {
                            self.add_thread(tid, MetricKind::FutexWaitTime, Some(key.clone()), None, ts - start);
                            self.add_thread(tid, MetricKind::FutexWaitCount, Some(key), None, 1);
                        }
                        FutexOp::Wake if *result > 0 => {
                            self.add_thread(tid, MetricKind::FutexWakeCount, Some(key), None, 1);
                        }
                        FutexOp::Wake => {}
                    }
                }
            }
            EventKind::VfsAccess { bri, dir, file_kind, blocking, enter } => {
                if *enter {
                    let counted = *file_kind == FileKind::Fifo && *blocking;
                    self.open_wait(
                        tid,
                        WaitClass::Vfs,
                        ts,
                        OpenWait::Vfs { bri: bri.clone(), dir: *dir, counted },
                    );
                } else if let Some((start, OpenWait::Vfs { bri, dir, counted })) =
                    self.close_wait(tid, WaitClass::Vfs)
                {
                    if counted {
                        let dir = Some(match dir {
                            IoDir::Read => WaitDir::Read,
                            IoDir::Write => WaitDir::Write,
                        });
                        self.add_thread(tid, MetricKind::PipeWaitTime, Some(bri.clone()), dir, ts - start);
                        self.add_thread(tid, MetricKind::PipeWaitCount, Some(bri), dir, 1);
                    }
                }
            }
            EventKind::SockAccess { bri, dir, enter, .. } => {
                if *enter {
                    self.open_wait(tid, WaitClass::Sock, ts, OpenWait::Sock { bri: bri.clone(), dir: *dir });
                } else if let Some((start, OpenWait::Sock { bri, dir })) =
                    self.close_wait(tid, WaitClass::Sock)
                {
                    let dir = Some(match dir {
                        SockDir::Recv => WaitDir::Read,
                        SockDir::Send => WaitDir::Write,
                    });
                    self.add_thread(tid, MetricKind::SocketWaitTime, Some(bri.clone()), dir, ts - start);
                    self.add_thread(tid, MetricKind::SocketWaitCount, Some(bri), dir, 1);
                }
            }
            EventKind::PollEnter { bris, .. } => {
                let set: BTreeSet<Bri> = bris.iter().cloned().collect();
                self.open_wait(
                    tid,
                    WaitClass::Poll,
                    ts,
                    OpenWait::Poll { bris: set.into_iter().collect() },
                );
            }
            EventKind::PollExit { .. } => {
                if let Some((start, OpenWait::Poll { bris })) = self.close_wait(tid, WaitClass::Poll) {
                    let elapsed = ts - start;
                    for bri in bris {
                        let (time, count) = match bri.kind() {
                            BriKind::Pipe => (MetricKind::PipeWaitTime, MetricKind::PipeWaitCount),
                            BriKind::Socket => (MetricKind::SocketWaitTime, MetricKind::SocketWaitCount),
                            _ => continue,
                        };
                        let dir = Some(WaitDir::Poll);
                        self.add_thread(tid, time, Some(bri.clone()), dir, elapsed);
                        self.add_thread(tid, count, Some(bri), dir, 1);
                    }
                }
            }
            EventKind::EpollCtl { epoll, target, action } => match action {
                EpollAction::Insert => {
                    self.interest
                        .entry(epoll.clone())
                        .or_default()
                        .entry(target.clone())
                        .or_insert(ts);
                }
                EpollAction::Remove => {
                    let inserted = self
                        .interest
                        .get_mut(epoll)
                        .and_then(|list| list.remove(target));
                    if let Some(inserted) = inserted {
                        for ((_, class), (start, wait)) in self.open.iter_mut() {
                            if *class != WaitClass::Epoll {
                                continue;
                            }
                            if let OpenWait::Epoll { epoll: waiting_on, pending } = wait {
                                if waiting_on == epoll {
                                    let from = (*start).max(inserted);
                                    *pending.entry(target.clone()).or_insert(0) += ts.saturating_sub(from);
                                }
                            }
                        }
                    }
                }
            },
            EventKind::EpollWaitEnter { epoll } => {
                self.open_wait(
                    tid,
                    WaitClass::Epoll,
                    ts,
                    OpenWait::Epoll { epoll: epoll.clone(), pending: BTreeMap::new() },
                );
            }
            EventKind::EpollWaitExit { .. } => {
                if let Some((start, OpenWait::Epoll { epoll, mut pending })) =
                    self.close_wait(tid, WaitClass::Epoll)
                {
                    self.add_thread(tid, MetricKind::EpollWaitTime, Some(epoll.clone()), None, ts - start);
                    self.add_thread(tid, MetricKind::EpollWaitCount, Some(epoll.clone()), None, 1);
                    if let Some(list) = self.interest.get(&epoll) {
                        for (bri, inserted) in list {
                            let from = start.max(*inserted);
                            *pending.entry(bri.clone()).or_insert(0) += ts.saturating_sub(from);
                        }
                    }
                    for (bri, waited) in pending {
                        self.add((SubjectKey::Epoll(epoll.clone()), MetricKind::EpollFileWait, Some(bri), None), waited);
                    }
                }
            }
            EventKind::BlockRq { dev, sectors } => {
                self.add_thread(tid, MetricKind::SectorCount, Some(dev.clone()), None, *sectors);
            }
        }
    }
}

/// Runs a whole event sequence through a fresh engine.
pub fn run_events<'a, I>(window_ns: Nanos, events: I) -> Result<Vec<WindowBatch>, EngineError>
where
    I: IntoIterator<Item = &'a KernelEvent>,
{
    let mut engine = MetricEngine::new(window_ns);
    let mut out = Vec::new();
    for event in events {
        out.extend(engine.observe(event)?);
    }
    out.extend(engine.finish());
    Ok(out)
}
