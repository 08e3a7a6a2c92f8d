//! Shared vocabulary: kernel events, resource identities, metric keys and
//! time windows.

mod bri;
mod event;
mod metric;
mod process;

pub use bri::{bri_of_file, canonicalize_socket, Bri, BriKind, Endpoint, SocketFamily};
pub use event::{
    EpollAction, EventKind, FileKind, FutexOp, IoDir, KernelEvent, Nanos, NextState, PollApi,
    SockDir, ThreadRef,
};
pub use metric::{
    Granularity, MetricKind, MetricSample, Subject, TimeWindow, WaitDir, NANOS_PER_SEC,
};
pub use process::{DiscoveryEdge, Peer, ProcessMeta, ThreadMeta};
