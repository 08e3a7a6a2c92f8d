//! Newline-delimited JSON trace format.
//!
//! One record per line. Every event carries `ts`, `tid`, `tgid`, `comm` and
//! `kind`; the remaining fields depend on the kind. Resources inside `bris`
//! and `target` use the store's `bri_key` encoding. A record of kind `meta`
//! may declare the host CPU count. Unknown fields are ignored, an unknown
//! kind is an error.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TraceError;
use crate::model::{
    bri_of_file, Bri, Endpoint, EpollAction, EventKind, FileKind, FutexOp, IoDir, KernelEvent,
    NextState, PollApi, SockDir, SocketFamily, ThreadRef,
};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub cpus: Option<u32>,
    pub events: Vec<KernelEvent>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ts: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tid: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tgid: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    comm: Option<String>,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cpus: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    next_state: Option<NextState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_iowait: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uaddr: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    op: Option<FutexOp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    val: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shared: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    result: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s_dev: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    i_ino: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_kind: Option<FileKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blocking: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    enter: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dst: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    api: Option<PollApi>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bris: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epoll_kaddr: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<EpollAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dev_major: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dev_minor: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sectors: Option<u64>,
}

enum Record {
    Meta { cpus: Option<u32> },
    Event(KernelEvent),
}

fn need<T>(value: Option<T>, field: &str) -> Result<T, String> {
    value.ok_or_else(|| format!("missing field `{field}`"))
}

fn parse_bri(key: &str) -> Result<Bri, String> {
    Bri::parse_key(key).map_err(|e| e.to_string())
}

impl RawRecord {
    fn into_record(self) -> Result<Record, String> {
        if self.kind == "meta" {
            return Ok(Record::Meta { cpus: self.cpus });
        }
        let ts = need(self.ts, "ts")?;
        let tid = need(self.tid, "tid")?;
        let tgid = need(self.tgid, "tgid")?;
        if tid == 0 || tgid == 0 {
            return Err("tid and tgid must be positive".into());
        }
        let thread = ThreadRef::new(tid, tgid, self.comm.clone().unwrap_or_default());
        let kind = match self.kind.as_str() {
            "sched_switch_out" => EventKind::SchedSwitchOut {
                next_state: need(self.next_state, "next_state")?,
                in_iowait: self.in_iowait.unwrap_or(false),
            },
            "sched_switch_in" => EventKind::SchedSwitchIn,
            "sched_wakeup" => EventKind::SchedWakeup,
            "futex_enter" => EventKind::FutexEnter {
                uaddr: need(self.uaddr, "uaddr")?,
                op: need(self.op, "op")?,
                val: self.val.unwrap_or(0),
                shared: self.shared.unwrap_or(false),
            },
            "futex_exit" => EventKind::FutexExit {
                result: need(self.result, "result")?,
            },
            "vfs_access" => {
                let dir = match need(self.dir.as_deref(), "dir")? {
                    "read" => IoDir::Read,
                    "write" => IoDir::Write,
                    other => return Err(format!("bad vfs dir `{other}`")),
                };
                EventKind::VfsAccess {
                    bri: bri_of_file(need(self.s_dev, "s_dev")?, need(self.i_ino, "i_ino")?),
                    dir,
                    file_kind: need(self.file_kind, "file_kind")?,
                    blocking: need(self.blocking, "blocking")?,
                    enter: need(self.enter, "enter")?,
                }
            }
            "sock_access" => {
                let dir = match need(self.dir.as_deref(), "dir")? {
                    "recv" => SockDir::Recv,
                    "send" => SockDir::Send,
                    other => return Err(format!("bad socket dir `{other}`")),
                };
                let family: SocketFamily = need(self.family.as_deref(), "family")?
                    .parse()
                    .map_err(|e: crate::ModelError| e.to_string())?;
                let src = Endpoint::parse(family, need(self.src.as_deref(), "src")?)
                    .map_err(|e| e.to_string())?;
                let dst = Endpoint::parse(family, need(self.dst.as_deref(), "dst")?)
                    .map_err(|e| e.to_string())?;
                EventKind::SockAccess {
                    bri: Bri::socket(family, src.clone(), dst),
                    dir,
                    enter: need(self.enter, "enter")?,
                    local: Some(src),
                }
            }
            "poll_enter" => EventKind::PollEnter {
                api: need(self.api, "api")?,
                bris: need(self.bris, "bris")?
                    .iter()
                    .map(|k| parse_bri(k))
                    .collect::<Result<_, _>>()?,
            },
            "poll_exit" => EventKind::PollExit {
                api: need(self.api, "api")?,
            },
            "epoll_ctl" => EventKind::EpollCtl {
                epoll: Bri::EpollObj {
                    kaddr: need(self.epoll_kaddr, "epoll_kaddr")?,
                },
                target: parse_bri(&need(self.target, "target")?)?,
                action: need(self.action, "action")?,
            },
            "epoll_wait_enter" => EventKind::EpollWaitEnter {
                epoll: Bri::EpollObj {
                    kaddr: need(self.epoll_kaddr, "epoll_kaddr")?,
                },
            },
            "epoll_wait_exit" => EventKind::EpollWaitExit {
                epoll: Bri::EpollObj {
                    kaddr: need(self.epoll_kaddr, "epoll_kaddr")?,
                },
            },
            "block_rq" => EventKind::BlockRq {
                dev: Bri::BlockDev {
                    major: need(self.dev_major, "dev_major")?,
                    minor: need(self.dev_minor, "dev_minor")?,
                },
                sectors: need(self.sectors, "sectors")?,
            },
            other => return Err(format!("unknown kind `{other}`")),
        };
        Ok(Record::Event(KernelEvent { ts, thread, kind }))
    }

    fn from_event(event: &KernelEvent) -> RawRecord {
        let mut raw = RawRecord {
            ts: Some(event.ts),
            tid: Some(event.thread.tid),
            tgid: Some(event.thread.tgid),
            comm: Some(event.thread.comm.clone()),
            kind: event.kind.name().to_string(),
            ..RawRecord::default()
        };
        match &event.kind {
            EventKind::SchedSwitchOut { next_state, in_iowait } => {
                raw.next_state = Some(*next_state);
                raw.in_iowait = Some(*in_iowait);
            }
            EventKind::SchedSwitchIn | EventKind::SchedWakeup => {}
            EventKind::FutexEnter { uaddr, op, val, shared } => {
                raw.uaddr = Some(*uaddr);
                raw.op = Some(*op);
                raw.val = Some(*val);
                if *shared {
                    raw.shared = Some(true);
                }
            }
            EventKind::FutexExit { result } => raw.result = Some(*result),
            EventKind::VfsAccess { bri, dir, file_kind, blocking, enter } => {
                if let Bri::VfsInode { s_dev, i_ino } = bri {
                    raw.s_dev = Some(*s_dev);
                    raw.i_ino = Some(*i_ino);
                }
                raw.dir = Some(match dir {
                    IoDir::Read => "read".into(),
                    IoDir::Write => "write".into(),
                });
                raw.file_kind = Some(*file_kind);
                raw.blocking = Some(*blocking);
                raw.enter = Some(*enter);
            }
            EventKind::SockAccess { bri, dir, enter, local } => {
                if let Bri::SocketTuple { family, a, b } = bri {
                    raw.family = Some(family.as_str().to_string());
                    let (src, dst) = match local {
                        Some(l) if l == b => (b, a),
                        _ => (a, b),
                    };
                    raw.src = Some(src.to_string());
                    raw.dst = Some(dst.to_string());
                }
                raw.dir = Some(match dir {
                    SockDir::Recv => "recv".into(),
                    SockDir::Send => "send".into(),
                });
                raw.enter = Some(*enter);
            }
            EventKind::PollEnter { api, bris } => {
                raw.api = Some(*api);
                raw.bris = Some(bris.iter().map(Bri::key).collect());
            }
            EventKind::PollExit { api } => raw.api = Some(*api),
            EventKind::EpollCtl { epoll, target, action } => {
                raw.epoll_kaddr = epoll_addr(epoll);
                raw.target = Some(target.key());
                raw.action = Some(*action);
            }
            EventKind::EpollWaitEnter { epoll } | EventKind::EpollWaitExit { epoll } => {
                raw.epoll_kaddr = epoll_addr(epoll);
            }
            EventKind::BlockRq { dev, sectors } => {
                if let Bri::BlockDev { major, minor } = dev {
                    raw.dev_major = Some(*major);
                    raw.dev_minor = Some(*minor);
                }
                raw.sectors = Some(*sectors);
            }
        }
        raw
    }
}

fn epoll_addr(bri: &Bri) -> Option<u64> {
    match bri {
        Bri::EpollObj { kaddr } => Some(*kaddr),
        _ => None,
    }
}

/// Parses a trace and orders its events by timestamp. The sort is stable, so
/// records with equal timestamps keep their file order.
pub fn read_trace<R: BufRead>(reader: R) -> Result<Trace, TraceError> {
    let mut trace = Trace::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match raw
            .into_record()
            .map_err(|message| TraceError::Parse { line: line_no, message })?
        {
            Record::Meta { cpus } => trace.cpus = cpus.or(trace.cpus),
            Record::Event(ev) => trace.events.push(ev),
        }
    }
    trace.events.sort_by_key(|e| e.ts);
    Ok(trace)
}

pub fn read_trace_file(path: &Path) -> Result<Trace, TraceError> {
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_trace(BufReader::new(file))
}

pub fn event_to_line(event: &KernelEvent) -> String {
    serde_json::to_string(&RawRecord::from_event(event)).expect("trace record serializes")
}

pub fn write_trace<W: Write>(mut out: W, trace: &Trace) -> std::io::Result<()> {
    if let Some(cpus) = trace.cpus {
        let meta = RawRecord {
            kind: "meta".into(),
            cpus: Some(cpus),
            ..RawRecord::default()
        };
        writeln!(out, "{}", serde_json::to_string(&meta).expect("meta serializes"))?;
    }
    for event in &trace.events {
        writeln!(out, "{}", event_to_line(event))?;
    }
    Ok(())
}
