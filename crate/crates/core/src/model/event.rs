use serde::{Deserialize, Serialize};

use super::bri::Bri;

/// Nanoseconds on the trace's monotonic clock.
pub type Nanos = u64;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ThreadRef {
    pub tid: u32,
    pub tgid: u32,
    pub comm: String,
}

impl ThreadRef {
    pub fn new(tid: u32, tgid: u32, comm: impl Into<String>) -> Self {
        let mut comm: String = comm.into();
        // kernel TASK_COMM_LEN is 16 including the terminator
        if comm.len() > 15 {
            let mut cut = 15;
            while !comm.is_char_boundary(cut) {
                cut -= 1;
            }
            comm.truncate(cut);
        }
        ThreadRef { tid, tgid, comm }
    }
}

/// State a thread enters when it is switched off a CPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NextState {
    /// Still TASK_RUNNING, i.e. preempted. Accounted as runnable.
    Running,
    Runnable,
    /// TASK_INTERRUPTIBLE
    Sleep,
    /// TASK_UNINTERRUPTIBLE
    Block,
    /// The thread exited.
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FutexOp {
    Wait,
    Wake,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IoDir {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SockDir {
    Recv,
    Send,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    Fifo,
    Regular,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PollApi {
    Select,
    Poll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpollAction {
    Insert,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    SchedSwitchOut { next_state: NextState, in_iowait: bool },
    SchedSwitchIn,
    SchedWakeup,
    FutexEnter { uaddr: u64, op: FutexOp, val: u32, shared: bool },
    FutexExit { result: i64 },
    VfsAccess { bri: Bri, dir: IoDir, file_kind: FileKind, blocking: bool, enter: bool },
    SockAccess { bri: Bri, dir: SockDir, enter: bool, local: Option<super::bri::Endpoint> },
    PollEnter { api: PollApi, bris: Vec<Bri> },
    PollExit { api: PollApi },
    EpollCtl { epoll: Bri, target: Bri, action: EpollAction },
    EpollWaitEnter { epoll: Bri },
    EpollWaitExit { epoll: Bri },
    BlockRq { dev: Bri, sectors: u64 },
}

impl EventKind {
    /// Name used in the trace format's `kind` field.
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::SchedSwitchOut { .. } => "sched_switch_out",
            EventKind::SchedSwitchIn => "sched_switch_in",
            EventKind::SchedWakeup => "sched_wakeup",
            EventKind::FutexEnter { .. } => "futex_enter",
            EventKind::FutexExit { .. } => "futex_exit",
            EventKind::VfsAccess { .. } => "vfs_access",
            EventKind::SockAccess { .. } => "sock_access",
            EventKind::PollEnter { .. } => "poll_enter",
            EventKind::PollExit { .. } => "poll_exit",
            EventKind::EpollCtl { .. } => "epoll_ctl",
            EventKind::EpollWaitEnter { .. } => "epoll_wait_enter",
            EventKind::EpollWaitExit { .. } => "epoll_wait_exit",
            EventKind::BlockRq { .. } => "block_rq",
        }
    }

    pub fn is_sched(&self) -> bool {
        matches!(
            self,
            EventKind::SchedSwitchOut { .. } | EventKind::SchedSwitchIn | EventKind::SchedWakeup
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelEvent {
    pub ts: Nanos,
    pub thread: ThreadRef,
    pub kind: EventKind,
}

impl KernelEvent {
    pub fn new(ts: Nanos, thread: ThreadRef, kind: EventKind) -> Self {
        KernelEvent { ts, thread, kind }
    }
}
