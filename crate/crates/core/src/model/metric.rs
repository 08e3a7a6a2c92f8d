use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::bri::{Bri, BriKind};
use super::event::{Nanos, ThreadRef};
use crate::error::ModelError;

pub const NANOS_PER_SEC: Nanos = 1_000_000_000;

/// What a metric row is keyed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Thread,
    ThreadResource(BriKind),
    EpollResource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Runtime,
    RqTime,
    BlockTime,
    IowaitTime,
    SleepTime,
    PipeWaitTime,
    PipeWaitCount,
    SocketWaitTime,
    SocketWaitCount,
    SectorCount,
    EpollWaitTime,
    EpollWaitCount,
    EpollFileWait,
    FutexWaitTime,
    FutexWaitCount,
    FutexWakeCount,
}

impl MetricKind {
    pub const ALL: [MetricKind; 16] = [
        MetricKind::Runtime,
        MetricKind::RqTime,
        MetricKind::BlockTime,
        MetricKind::IowaitTime,
        MetricKind::SleepTime,
        MetricKind::PipeWaitTime,
        MetricKind::PipeWaitCount,
        MetricKind::SocketWaitTime,
        MetricKind::SocketWaitCount,
        MetricKind::SectorCount,
        MetricKind::EpollWaitTime,
        MetricKind::EpollWaitCount,
        MetricKind::EpollFileWait,
        MetricKind::FutexWaitTime,
        MetricKind::FutexWaitCount,
        MetricKind::FutexWakeCount,
    ];

    pub const SCHEDULER: [MetricKind; 5] = [
        MetricKind::Runtime,
        MetricKind::RqTime,
        MetricKind::BlockTime,
        MetricKind::IowaitTime,
        MetricKind::SleepTime,
    ];

    pub fn granularity(self) -> Granularity {
        use MetricKind::*;
        match self {
            Runtime | RqTime | BlockTime | IowaitTime | SleepTime => Granularity::Thread,
            PipeWaitTime | PipeWaitCount => Granularity::ThreadResource(BriKind::Pipe),
            SocketWaitTime | SocketWaitCount => Granularity::ThreadResource(BriKind::Socket),
            SectorCount => Granularity::ThreadResource(BriKind::Device),
            EpollWaitTime | EpollWaitCount => Granularity::ThreadResource(BriKind::Epoll),
            EpollFileWait => Granularity::EpollResource,
            FutexWaitTime | FutexWaitCount | FutexWakeCount => {
                Granularity::ThreadResource(BriKind::Futex)
            }
        }
    }

    pub fn needs_resource(self) -> bool {
        self.granularity() != Granularity::Thread
    }

    pub fn is_time(self) -> bool {
        use MetricKind::*;
        matches!(
            self,
            Runtime
                | RqTime
                | BlockTime
                | IowaitTime
                | SleepTime
                | PipeWaitTime
                | SocketWaitTime
                | EpollWaitTime
                | EpollFileWait
                | FutexWaitTime
        )
    }

    pub fn as_str(self) -> &'static str {
        use MetricKind::*;
        match self {
            Runtime => "runtime",
            RqTime => "rq_time",
            BlockTime => "block_time",
            IowaitTime => "iowait_time",
            SleepTime => "sleep_time",
            PipeWaitTime => "pipe_wait_time",
            PipeWaitCount => "pipe_wait_count",
            SocketWaitTime => "socket_wait_time",
            SocketWaitCount => "socket_wait_count",
            SectorCount => "sector_count",
            EpollWaitTime => "epoll_wait_time",
            EpollWaitCount => "epoll_wait_count",
            EpollFileWait => "epoll_file_wait",
            FutexWaitTime => "futex_wait_time",
            FutexWaitCount => "futex_wait_count",
            FutexWakeCount => "futex_wake_count",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ModelError::UnknownMetric(s.to_string()))
    }
}

/// Half-open interval `[start_ns, end_ns)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start_ns: Nanos,
    pub end_ns: Nanos,
}

impl TimeWindow {
    pub fn new(start_ns: Nanos, end_ns: Nanos) -> Result<Self, ModelError> {
        if end_ns <= start_ns {
            return Err(ModelError::EmptyWindow { start_ns, end_ns });
        }
        Ok(TimeWindow { start_ns, end_ns })
    }

    /// The collection window of length `len` containing `ts`.
    pub fn containing(ts: Nanos, len: Nanos) -> Self {
        let start_ns = ts - ts % len;
        TimeWindow {
            start_ns,
            end_ns: start_ns + len,
        }
    }

    pub fn len(&self) -> Nanos {
        self.end_ns - self.start_ns
    }

    pub fn is_empty(&self) -> bool {
        self.end_ns <= self.start_ns
    }

    pub fn contains(&self, ts: Nanos) -> bool {
        self.start_ns <= ts && ts < self.end_ns
    }

    pub fn next(&self) -> Self {
        TimeWindow {
            start_ns: self.end_ns,
            end_ns: self.end_ns + self.len(),
        }
    }
}

/// Who a metric row describes. `epoll_file_wait` rows are keyed by the epoll
/// object rather than by a thread.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Thread(ThreadRef),
    Epoll(Bri),
}

impl Subject {
    pub fn thread(&self) -> Option<&ThreadRef> {
        match self {
            Subject::Thread(t) => Some(t),
            Subject::Epoll(_) => None,
        }
    }
}

/// Direction qualifier for pipe and socket waits. `Poll` marks time
/// attributed through select/poll, where no direction is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaitDir {
    Read,
    Write,
    Poll,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSample {
    pub window: TimeWindow,
    pub subject: Subject,
    pub metric: MetricKind,
    pub resource: Option<Bri>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<WaitDir>,
    pub value: u64,
}

impl MetricSample {
    pub fn tid(&self) -> Option<u32> {
        self.subject.thread().map(|t| t.tid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_metrics_with_expected_granularity() {
        assert_eq!(MetricKind::ALL.len(), 16);
        let thread_only: Vec<_> = MetricKind::ALL
            .iter()
            .filter(|m| m.granularity() == Granularity::Thread)
            .collect();
        assert_eq!(thread_only.len(), 5);
        assert_eq!(MetricKind::EpollFileWait.granularity(), Granularity::EpollResource);
        assert_eq!(
            MetricKind::FutexWakeCount.granularity(),
            Granularity::ThreadResource(BriKind::Futex)
        );
        for m in MetricKind::ALL {
            assert_eq!(m.as_str().parse::<MetricKind>().unwrap(), m);
        }
    }

    #[test]
    fn window_alignment() {
        let w = TimeWindow::containing(1_500_000_000, NANOS_PER_SEC);
        assert_eq!(w, TimeWindow { start_ns: NANOS_PER_SEC, end_ns: 2 * NANOS_PER_SEC });
        assert!(w.contains(NANOS_PER_SEC));
        assert!(!w.contains(2 * NANOS_PER_SEC));
        assert_eq!(w.next().start_ns, 2 * NANOS_PER_SEC);
        assert!(TimeWindow::new(5, 5).is_err());
    }
}
