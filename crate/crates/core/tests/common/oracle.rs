//! Brute-force metric oracle.
//!
//! Works from whole-trace scans rather than an incremental state machine:
//! scheduler state is rebuilt as a list of intervals per thread and then
//! intersected with each window; every wait exit is paired by scanning
//! backwards for the latest unmatched enter; epoll interest membership is
//! rebuilt as intervals per (epoll, file) and intersected with each wait.

use std::collections::{BTreeMap, BTreeSet};

use prismlike_core::model::{
    Bri, BriKind, EpollAction, EventKind, FileKind, FutexOp, IoDir, KernelEvent, MetricKind,
    Nanos, NextState, SockDir, WaitDir,
};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Who {
    Thread(u32),
    Epoll(Bri),
}

pub type Key = (Who, MetricKind, Option<Bri>, Option<WaitDir>);

/// window start -> key -> value, zero values removed.
pub type Table = BTreeMap<Nanos, BTreeMap<Key, u64>>;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum St {
    Run,
    Queue,
    Sleep,
    Block { iowait: bool },
}

fn overlap(a0: Nanos, a1: Nanos, b0: Nanos, b1: Nanos) -> Nanos {
    let lo = a0.max(b0);
    let hi = a1.min(b1);
    hi.saturating_sub(lo)
}

fn class_of(kind: &EventKind) -> Option<(u8, bool)> {
    // (class, is_enter)
    match kind {
        EventKind::FutexEnter { .. } => Some((0, true)),
        EventKind::FutexExit { .. } => Some((0, false)),
        EventKind::VfsAccess { enter, .. } => Some((1, *enter)),
        EventKind::SockAccess { enter, .. } => Some((2, *enter)),
        EventKind::PollEnter { .. } => Some((3, true)),
        EventKind::PollExit { .. } => Some((3, false)),
        EventKind::EpollWaitEnter { .. } => Some((4, true)),
        EventKind::EpollWaitExit { .. } => Some((4, false)),
        _ => None,
    }
}

/// Index of the enter matching the exit at `exit_idx`, if any.
fn matching_enter(events: &[KernelEvent], exit_idx: usize) -> Option<usize> {
    let tid = events[exit_idx].thread.tid;
    let (class, _) = class_of(&events[exit_idx].kind)?;
    for i in (0..exit_idx).rev() {
        let e = &events[i];
        if e.thread.tid != tid {
            continue;
        }
        match class_of(&e.kind) {
            Some((c, true)) if c == class => return Some(i),
            Some((c, false)) if c == class => return None,
            _ => {}
        }
    }
    None
}

pub fn compute(events: &[KernelEvent], window_ns: Nanos) -> Table {
    let mut table: Table = BTreeMap::new();
    if events.is_empty() {
        return table;
    }
    let first = events[0].ts;
    let last = events.last().unwrap().ts;
    let first_window = first - first % window_ns;
    let last_window = last - last % window_ns;
    let mut w = first_window;
    while w <= last_window {
        table.insert(w, BTreeMap::new());
        w += window_ns;
    }
    let win_of = |ts: Nanos| ts - ts % window_ns;
    let add = |table: &mut Table, w: Nanos, key: Key, v: u64| {
        *table.get_mut(&w).unwrap().entry(key).or_insert(0) += v;
    };

    // Scheduler intervals per thread.
    let tids: BTreeSet<u32> = events.iter().map(|e| e.thread.tid).collect();
    for &tid in &tids {
        let mut state: Option<(St, Nanos)> = None;
        let mut intervals: Vec<(St, Nanos, Nanos)> = Vec::new();
        for e in events.iter().filter(|e| e.thread.tid == tid) {
            let next = match &e.kind {
                EventKind::SchedSwitchOut { next_state, in_iowait } => match next_state {
                    NextState::Running | NextState::Runnable => Some(Some(St::Queue)),
                    NextState::Sleep => Some(Some(St::Sleep)),
                    NextState::Block => Some(Some(St::Block { iowait: *in_iowait })),
                    NextState::Dead => Some(None),
                },
                EventKind::SchedSwitchIn => Some(Some(St::Run)),
                EventKind::SchedWakeup => match state {
                    None | Some((St::Sleep, _)) | Some((St::Block { .. }, _)) => Some(Some(St::Queue)),
                    _ => None,
                },
                _ => None,
            };
            if let Some(next) = next {
                if let Some((st, since)) = state {
                    intervals.push((st, since, e.ts));
                }
                state = next.map(|st| (st, e.ts));
            }
        }
        if let Some((st, since)) = state {
            intervals.push((st, since, last));
        }
        for (st, from, to) in intervals {
            let mut w = first_window;
            while w <= last_window {
                let d = overlap(from, to, w, w + window_ns);
                if d > 0 {
                    let metric = match st {
                        St::Run => MetricKind::Runtime,
                        St::Queue => MetricKind::RqTime,
                        St::Sleep => MetricKind::SleepTime,
                        St::Block { .. } => MetricKind::BlockTime,
                    };
                    add(&mut table, w, (Who::Thread(tid), metric, None, None), d);
                    if st == (St::Block { iowait: true }) {
                        add(&mut table, w, (Who::Thread(tid), MetricKind::IowaitTime, None, None), d);
                    }
                }
                w += window_ns;
            }
        }
    }

    // Paired waits.
    for (i, exit) in events.iter().enumerate() {
        let Some((_, false)) = class_of(&exit.kind) else { continue };
        let Some(j) = matching_enter(events, i) else { continue };
        let enter = &events[j];
        let tid = exit.thread.tid;
        let d = exit.ts - enter.ts;
        let w = win_of(exit.ts);
        match (&enter.kind, &exit.kind) {
            (EventKind::FutexEnter { uaddr, op, shared, .. }, EventKind::FutexExit { result }) => {
                let key = Bri::futex(enter.thread.tgid, *uaddr, *shared);
                match op {
                    FutexOp::Wait => {
                        add(&mut table, w, (Who::Thread(tid), MetricKind::FutexWaitTime, Some(key.clone()), None), d);
                        add(&mut table, w, (Who::Thread(tid), MetricKind::FutexWaitCount, Some(key), None), 1);
                    }
                    FutexOp::Wake => {
                        if *result > 0 {
                            add(&mut table, w, (Who::Thread(tid), MetricKind::FutexWakeCount, Some(key), None), 1);
                        }
                    }
                }
            }
            (EventKind::VfsAccess { bri, dir, file_kind, blocking, .. }, _) => {
                if *file_kind == FileKind::Fifo && *blocking {
                    let dir = Some(if *dir == IoDir::Read { WaitDir::Read } else { WaitDir::Write });
                    add(&mut table, w, (Who::Thread(tid), MetricKind::PipeWaitTime, Some(bri.clone()), dir), d);
                    add(&mut table, w, (Who::Thread(tid), MetricKind::PipeWaitCount, Some(bri.clone()), dir), 1);
                }
            }
            (EventKind::SockAccess { bri, dir, .. }, _) => {
                let dir = Some(if *dir == SockDir::Recv { WaitDir::Read } else { WaitDir::Write });
                add(&mut table, w, (Who::Thread(tid), MetricKind::SocketWaitTime, Some(bri.clone()), dir), d);
                add(&mut table, w, (Who::Thread(tid), MetricKind::SocketWaitCount, Some(bri.clone()), dir), 1);
            }
            (EventKind::PollEnter { bris, .. }, _) => {
                let set: BTreeSet<&Bri> = bris.iter().collect();
                for bri in set {
                    let (t, c) = match bri.kind() {
                        BriKind::Pipe => (MetricKind::PipeWaitTime, MetricKind::PipeWaitCount),
                        BriKind::Socket => (MetricKind::SocketWaitTime, MetricKind::SocketWaitCount),
                        _ => continue,
                    };
                    add(&mut table, w, (Who::Thread(tid), t, Some(bri.clone()), Some(WaitDir::Poll)), d);
                    add(&mut table, w, (Who::Thread(tid), c, Some(bri.clone()), Some(WaitDir::Poll)), 1);
                }
            }
            (EventKind::EpollWaitEnter { epoll }, _) => {
                add(&mut table, w, (Who::Thread(tid), MetricKind::EpollWaitTime, Some(epoll.clone()), None), d);
                add(&mut table, w, (Who::Thread(tid), MetricKind::EpollWaitCount, Some(epoll.clone()), None), 1);
                // membership intervals of every file ever registered with this epoll,
                // built from ctl events that precede the exit in stream order
                let mut targets: BTreeSet<Bri> = BTreeSet::new();
                for e in &events[..i] {
                    if let EventKind::EpollCtl { epoll: ep, target, .. } = &e.kind {
                        if ep == epoll {
                            targets.insert(target.clone());
                        }
                    }
                }
                for target in targets {
                    let mut member_since: Option<Nanos> = None;
                    let mut waited = 0;
                    for e in &events[..i] {
                        if let EventKind::EpollCtl { epoll: ep, target: t, action } = &e.kind {
                            if ep != epoll || *t != target {
                                continue;
                            }
                            match (action, member_since) {
                                (EpollAction::Insert, None) => member_since = Some(e.ts),
                                (EpollAction::Remove, Some(since)) => {
                                    waited += overlap(since, e.ts, enter.ts, exit.ts);
                                    member_since = None;
                                }
                                _ => {}
                            }
                        }
                    }
                    if let Some(since) = member_since {
                        waited += overlap(since, exit.ts, enter.ts, exit.ts);
                    }
                    if waited > 0 {
                        add(&mut table, w, (Who::Epoll(epoll.clone()), MetricKind::EpollFileWait, Some(target), None), waited);
                    }
                }
            }
            _ => {}
        }
    }

    for e in events {
        if let EventKind::BlockRq { dev, sectors } = &e.kind {
            add(&mut table, win_of(e.ts), (Who::Thread(e.thread.tid), MetricKind::SectorCount, Some(dev.clone()), None), *sectors);
        }
    }

    for rows in table.values_mut() {
        rows.retain(|_, v| *v > 0);
    }
    table
}

/// Converts engine output into the oracle's table shape.
pub fn from_batches(batches: &[prismlike_core::engine::WindowBatch]) -> Table {
    use prismlike_core::model::Subject;
    let mut table: Table = BTreeMap::new();
    for batch in batches {
        let rows = table.entry(batch.window.start_ns).or_default();
        for s in &batch.samples {
            let who = match &s.subject {
                Subject::Thread(t) => Who::Thread(t.tid),
                Subject::Epoll(e) => Who::Epoll(e.clone()),
            };
            *rows.entry((who, s.metric, s.resource.clone(), s.dir)).or_insert(0) += s.value;
        }
    }
    table
}

/// Per-metric totals over the whole trace.
pub fn totals(table: &Table) -> BTreeMap<MetricKind, u64> {
    let mut out = BTreeMap::new();
    for rows in table.values() {
        for ((_, m, _, _), v) in rows {
            *out.entry(*m).or_insert(0) += v;
        }
    }
    out
}
