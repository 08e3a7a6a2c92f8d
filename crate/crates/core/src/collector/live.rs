//! Live collection through an external probe loader.
//!
//! The loader is started as a child process with `--pids <tgid,...>`. It
//! attaches the kernel probes, then writes the binary record stream (see
//! [`super::wire`]) to stdout. Whenever discovery adds a process the
//! collector writes `monitor <tgid>` on the loader's stdin. Closing stdin
//! or SIGKILL ends the loader.
//!
//! Records from different CPUs may arrive slightly out of order, so they
//! pass through a reorder buffer before ingestion.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::{BufReader, Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};

use super::wire::{RecordReader, WireRecord};
use super::{Session, SessionConfig, SessionSummary};
use crate::error::{CollectorError, WireError};
use crate::model::{KernelEvent, Nanos};
use crate::store::MetricStore;

pub const DEFAULT_REORDER_SLACK_NS: Nanos = 50_000_000;

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub loader: PathBuf,
    pub loader_args: Vec<String>,
    /// Stop after this long; `None` runs until the stop flag is raised.
    pub duration: Option<Duration>,
    pub stop: Arc<AtomicBool>,
    pub reorder_slack_ns: Nanos,
    /// Skip the effective-uid check, for loaders that do not need root.
    pub skip_privilege_check: bool,
}

impl LiveConfig {
    pub fn new(loader: impl Into<PathBuf>) -> Self {
        LiveConfig {
            loader: loader.into(),
            loader_args: Vec::new(),
            duration: None,
            stop: Arc::new(AtomicBool::new(false)),
            reorder_slack_ns: DEFAULT_REORDER_SLACK_NS,
            skip_privilege_check: false,
        }
    }
}

/// Holds events until no earlier event can still arrive.
#[derive(Debug, Default)]
pub struct ReorderBuffer {
    slack: Nanos,
    seq: u64,
    heap: BinaryHeap<Reverse<(Nanos, u64, OrdEvent)>>,
    newest: Nanos,
    released: Option<Nanos>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct OrdEvent(KernelEvent);

impl PartialOrd for OrdEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdEvent {
    // ordering is carried by (ts, seq); payloads never decide
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

impl ReorderBuffer {
    pub fn new(slack: Nanos) -> Self {
        ReorderBuffer { slack, ..ReorderBuffer::default() }
    }

    /// Adds an event. Returns `false` if it is older than something already
    /// released and had to be discarded.
    pub fn push(&mut self, event: KernelEvent) -> bool {
        if self.released.is_some_and(|r| event.ts < r) {
            return false;
        }
        self.newest = self.newest.max(event.ts);
        self.seq += 1;
        self.heap.push(Reverse((event.ts, self.seq, OrdEvent(event))));
        true
    }

    /// Events that are at least `slack` older than the newest one seen.
    pub fn ready(&mut self) -> Vec<KernelEvent> {
        let horizon = self.newest.saturating_sub(self.slack);
        self.pop_while(|ts| ts <= horizon)
    }

    pub fn drain(&mut self) -> Vec<KernelEvent> {
        self.pop_while(|_| true)
    }

    fn pop_while(&mut self, keep: impl Fn(Nanos) -> bool) -> Vec<KernelEvent> {
        let mut out = Vec::new();
        while let Some(Reverse((ts, _, _))) = self.heap.peek() {
            if !keep(*ts) {
                break;
            }
            let Reverse((ts, _, OrdEvent(e))) = self.heap.pop().unwrap();
            self.released = Some(ts);
            out.push(e);
        }
        out
    }
}

fn has_privileges() -> bool {
    // SAFETY: geteuid has no preconditions and cannot fail.
    unsafe { libc::geteuid() == 0 }
}

/// Feeds a record stream into a session until it ends or `stop` is raised.
/// Newly monitored processes are reported through `on_join`.
pub fn ingest_stream<R, F>(
    input: R,
    session: &mut Session,
    slack: Nanos,
    stop: &AtomicBool,
    mut on_join: F,
) -> Result<(), CollectorError>
where
    R: Read + Send + 'static,
    F: FnMut(&[u32]),
{
    let mut reader = RecordReader::new(BufReader::new(input))?;
    let (tx, rx) = mpsc::channel::<Result<WireRecord, WireError>>();
    thread::spawn(move || {
        for item in reader.by_ref() {
            let fatal = item.is_err();
            if tx.send(item).is_err() || fatal {
                break;
            }
        }
    });
    let mut buffer = ReorderBuffer::new(slack);
    let mut apply = |session: &mut Session, events: Vec<KernelEvent>| -> Result<(), CollectorError> {
        for event in events {
            let joined = session.ingest(&event)?;
            if !joined.is_empty() {
                on_join(&joined);
            }
        }
        Ok(())
    };
    loop {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        match rx.recv_timeout(Duration::from_millis(100)) {
            Ok(Ok(WireRecord::Meta { cpus })) => session.set_cpus(cpus)?,
            Ok(Ok(WireRecord::Event(event))) => {
                if !buffer.push(event) {
                    session.note_late_event();
                }
                apply(session, buffer.ready())?;
            }
            Ok(Err(e)) => return Err(e.into()),
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
    apply(session, buffer.drain())
}

pub(super) fn run_live(config: &SessionConfig, live: &LiveConfig) -> Result<SessionSummary, CollectorError> {
    let open = || -> Result<Session, CollectorError> {
        let store = MetricStore::create(&config.output_db_path)?;
        Session::new(store, &config.bootstrap_pids, config.window_ns, None, config.max_bris_per_thread)
    };
    if live.duration == Some(Duration::ZERO) {
        return Ok(open()?.finish()?.0);
    }
    if !live.skip_privilege_check && !has_privileges() {
        return Err(CollectorError::Privilege("loading kernel probes requires root (CAP_BPF and CAP_PERFMON)".into()));
    }
    let mut session = open()?;
    let pids: Vec<String> = config.bootstrap_pids.iter().map(u32::to_string).collect();
    let mut child = Command::new(&live.loader)
        .args(&live.loader_args)
        .arg("--pids")
        .arg(pids.join(","))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| CollectorError::ProbeLoad(format!("starting {}: {e}", live.loader.display())))?;
    info!("probe loader started as pid {}", child.id());
    let stdout = child.stdout.take().expect("piped stdout");
    let mut stdin = child.stdin.take();

    let stop = Arc::new(AtomicBool::new(false));
    let deadline = live.duration.map(|d| Instant::now() + d);
    {
        let stop = stop.clone();
        let user_stop = live.stop.clone();
        thread::spawn(move || loop {
            if user_stop.load(Ordering::SeqCst) || deadline.is_some_and(|d| Instant::now() >= d) {
                stop.store(true, Ordering::SeqCst);
                break;
            }
            thread::sleep(Duration::from_millis(20));
        });
    }
    let result = ingest_stream(stdout, &mut session, live.reorder_slack_ns, &stop, |joined| {
        if let Some(pipe) = stdin.as_mut() {
            for tgid in joined {
                if writeln!(pipe, "monitor {tgid}").and_then(|_| pipe.flush()).is_err() {
                    warn!("probe loader stopped accepting monitor updates");
                    break;
                }
            }
        }
    });
    drop(stdin);
    let _ = child.kill();
    let status = child.wait()?;
    match result {
        Err(CollectorError::Wire(WireError::Truncated)) if !stop.load(Ordering::SeqCst) => {
            return Err(CollectorError::ProbeLoad(format!("loader exited ({status}) before sending a stream header")));
        }
        Err(e) => return Err(e),
        Ok(()) => {}
    }
    Ok(session.finish()?.0)
}
