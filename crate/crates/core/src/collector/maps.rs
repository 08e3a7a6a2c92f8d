//! Byte layouts of the in-kernel aggregation maps.
//!
//! The probes keep per-second summaries in four hash maps, which the loader
//! dumps once per window as key/value byte pairs. Layouts are fixed-size and
//! little-endian; `MAP_LAYOUT_VERSION` must match the probe build.
//!
//! ```text
//! thread_stats   key  u32 tid
//!                val  u64 runtime, u64 rq_time, u64 block_time,
//!                     u64 iowait_time, u64 sleep_time,
//!                     u32 tgid, [u8; 16] comm, u32 pad           (64 bytes)
//! res_stats      key  u32 tid, u8 class, u8 dir, u16 pad,
//!                     u64 bri_id                                 (16 bytes)
//!                val  u64 time_ns, u64 count, u32 tgid, u32 pad  (24 bytes)
//! epoll_files    key  u64 epoll_id, u64 bri_id                   (16 bytes)
//!                val  u64 wait_ns                                (8 bytes)
//! bri_table      key  u64 bri_id
//!                val  wire-encoded resource, zero padded          (64 bytes)
//! ```
//!
//! `class`: 1 pipe, 2 socket, 3 futex wait, 4 futex wake, 5 epoll,
//! 6 block device. `dir`: 0 none, 1 read, 2 write, 3 poll. For futex wakes
//! `count` holds the wake count and for block devices the sector count.

use std::collections::BTreeMap;

use super::wire::{decode_bri, encode_bri};
use crate::engine::WindowBatch;
use crate::error::WireError;
use crate::model::{Bri, MetricKind, MetricSample, Nanos, Subject, ThreadRef, TimeWindow, WaitDir};

pub const MAP_LAYOUT_VERSION: u32 = 1;
pub const THREAD_VALUE_SIZE: usize = 64;
pub const RES_KEY_SIZE: usize = 16;
pub const RES_VALUE_SIZE: usize = 24;
pub const EPOLL_KEY_SIZE: usize = 16;
pub const BRI_VALUE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ResClass {
    Pipe = 1,
    Socket = 2,
    FutexWait = 3,
    FutexWake = 4,
    Epoll = 5,
    Device = 6,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ThreadStats {
    pub tgid: u32,
    pub comm: String,
    /// runtime, rq_time, block_time, iowait_time, sleep_time
    pub sched: [u64; 5],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ResKey {
    pub tid: u32,
    pub class: ResClass,
    pub dir: Option<WaitDir>,
    pub bri_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ResValue {
    pub time_ns: u64,
    pub count: u64,
    pub tgid: u32,
}

/// One window's dump of all four maps.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MapSnapshot {
    pub threads: BTreeMap<u32, ThreadStats>,
    pub resources: BTreeMap<ResKey, ResValue>,
    pub epoll_files: BTreeMap<(u64, u64), u64>,
    pub bris: BTreeMap<u64, Bri>,
}

/// Raw key/value byte pairs of one dump.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawMaps {
    pub thread_stats: Vec<(Vec<u8>, Vec<u8>)>,
    pub res_stats: Vec<(Vec<u8>, Vec<u8>)>,
    pub epoll_files: Vec<(Vec<u8>, Vec<u8>)>,
    pub bri_table: Vec<(Vec<u8>, Vec<u8>)>,
}

fn dir_code(dir: Option<WaitDir>) -> u8 {
    match dir {
        None => 0,
        Some(WaitDir::Read) => 1,
        Some(WaitDir::Write) => 2,
        Some(WaitDir::Poll) => 3,
    }
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn expect_len(b: &[u8], n: usize) -> Result<(), WireError> {
    if b.len() != n {
        return Err(WireError::Invalid(format!("map entry of {} bytes, expected {n}", b.len())));
    }
    Ok(())
}

impl MapSnapshot {
    /// What the probes would hold for one closed window.
    pub fn from_batch(batch: &WindowBatch) -> MapSnapshot {
        let mut snap = MapSnapshot::default();
        let mut ids: BTreeMap<Bri, u64> = BTreeMap::new();
        let mut id_of = |bri: &Bri, bris: &mut BTreeMap<u64, Bri>| -> u64 {
            let next = ids.len() as u64 + 1;
            let id = *ids.entry(bri.clone()).or_insert(next);
            bris.insert(id, bri.clone());
            id
        };
        for s in &batch.samples {
            match &s.subject {
                Subject::Epoll(epoll) => {
                    let e = id_of(epoll, &mut snap.bris);
                    let f = id_of(s.resource.as_ref().expect("epoll file row has a resource"), &mut snap.bris);
                    snap.epoll_files.insert((e, f), s.value);
                }
                Subject::Thread(t) => {
                    let entry = snap.threads.entry(t.tid).or_default();
                    entry.tgid = t.tgid;
                    entry.comm = t.comm.clone();
                    if let Some(slot) = MetricKind::SCHEDULER.iter().position(|m| *m == s.metric) {
                        entry.sched[slot] = s.value;
                        continue;
                    }
                    let bri = s.resource.as_ref().expect("resource metric has a resource");
                    let class = match s.metric {
                        MetricKind::PipeWaitTime | MetricKind::PipeWaitCount => ResClass::Pipe,
                        MetricKind::SocketWaitTime | MetricKind::SocketWaitCount => ResClass::Socket,
                        MetricKind::FutexWaitTime | MetricKind::FutexWaitCount => ResClass::FutexWait,
                        MetricKind::FutexWakeCount => ResClass::FutexWake,
                        MetricKind::EpollWaitTime | MetricKind::EpollWaitCount => ResClass::Epoll,
                        _ => ResClass::Device,
                    };
                    let key = ResKey { tid: t.tid, class, dir: s.dir, bri_id: id_of(bri, &mut snap.bris) };
                    let v = snap.resources.entry(key).or_default();
                    v.tgid = t.tgid;
                    if s.metric.is_time() {
                        v.time_ns = s.value;
                    } else {
                        v.count = s.value;
                    }
                }
            }
        }
        snap
    }

    /// Samples of the window starting at `start` with length `window_ns`.
    pub fn to_samples(&self, start: Nanos, window_ns: Nanos) -> Result<Vec<MetricSample>, WireError> {
        let window = TimeWindow { start_ns: start, end_ns: start + window_ns };
        let bri = |id: u64| self.bris.get(&id).cloned().ok_or_else(|| WireError::Invalid(format!("unknown resource id {id}")));
        let mut out = Vec::new();
        let thread = |tid: u32, tgid: u32| {
            let comm = self.threads.get(&tid).map(|t| t.comm.clone()).unwrap_or_default();
            ThreadRef { tid, tgid, comm }
        };
        for (tid, stats) in &self.threads {
            for (metric, value) in MetricKind::SCHEDULER.iter().zip(stats.sched) {
                if value > 0 {
                    out.push(MetricSample {
                        window,
                        subject: Subject::Thread(thread(*tid, stats.tgid)),
                        metric: *metric,
                        resource: None,
                        dir: None,
                        value,
                    });
                }
            }
        }
        for (key, v) in &self.resources {
            let (time, count) = match key.class {
                ResClass::Pipe => (Some(MetricKind::PipeWaitTime), Some(MetricKind::PipeWaitCount)),
                ResClass::Socket => (Some(MetricKind::SocketWaitTime), Some(MetricKind::SocketWaitCount)),
                ResClass::FutexWait => (Some(MetricKind::FutexWaitTime), Some(MetricKind::FutexWaitCount)),
                ResClass::FutexWake => (None, Some(MetricKind::FutexWakeCount)),
                ResClass::Epoll => (Some(MetricKind::EpollWaitTime), Some(MetricKind::EpollWaitCount)),
                ResClass::Device => (None, Some(MetricKind::SectorCount)),
            };
            let resource = bri(key.bri_id)?;
            for (metric, value) in [(time, v.time_ns), (count, v.count)] {
                if let (Some(metric), true) = (metric, value > 0) {
                    out.push(MetricSample {
                        window,
                        subject: Subject::Thread(thread(key.tid, v.tgid)),
                        metric,
                        resource: Some(resource.clone()),
                        dir: key.dir,
                        value,
                    });
                }
            }
        }
        for ((e, f), wait) in &self.epoll_files {
            if *wait > 0 {
                out.push(MetricSample {
                    window,
                    subject: Subject::Epoll(bri(*e)?),
                    metric: MetricKind::EpollFileWait,
                    resource: Some(bri(*f)?),
                    dir: None,
                    value: *wait,
                });
            }
        }
        Ok(out)
    }

    pub fn encode(&self) -> Result<RawMaps, WireError> {
        let mut raw = RawMaps::default();
        for (tid, t) in &self.threads {
            let mut v = Vec::with_capacity(THREAD_VALUE_SIZE);
            for x in t.sched {
                v.extend_from_slice(&x.to_le_bytes());
            }
            v.extend_from_slice(&t.tgid.to_le_bytes());
            let mut comm = [0u8; 16];
            let n = t.comm.len().min(15);
            comm[..n].copy_from_slice(&t.comm.as_bytes()[..n]);
            v.extend_from_slice(&comm);
            v.extend_from_slice(&[0; 4]);
            raw.thread_stats.push((tid.to_le_bytes().to_vec(), v));
        }
        for (k, v) in &self.resources {
            let mut key = Vec::with_capacity(RES_KEY_SIZE);
            key.extend_from_slice(&k.tid.to_le_bytes());
            key.push(k.class as u8);
            key.push(dir_code(k.dir));
            key.extend_from_slice(&[0; 2]);
            key.extend_from_slice(&k.bri_id.to_le_bytes());
            let mut val = Vec::with_capacity(RES_VALUE_SIZE);
            val.extend_from_slice(&v.time_ns.to_le_bytes());
            val.extend_from_slice(&v.count.to_le_bytes());
            val.extend_from_slice(&v.tgid.to_le_bytes());
            val.extend_from_slice(&[0; 4]);
            raw.res_stats.push((key, val));
        }
        for ((e, f), wait) in &self.epoll_files {
            let mut key = e.to_le_bytes().to_vec();
            key.extend_from_slice(&f.to_le_bytes());
            raw.epoll_files.push((key, wait.to_le_bytes().to_vec()));
        }
        for (id, bri) in &self.bris {
            let mut val = encode_bri(bri)?;
            if val.len() > BRI_VALUE_SIZE {
                return Err(WireError::Invalid(format!("resource {bri} does not fit a map slot")));
            }
            val.resize(BRI_VALUE_SIZE, 0);
            raw.bri_table.push((id.to_le_bytes().to_vec(), val));
        }
        Ok(raw)
    }

    pub fn decode(raw: &RawMaps) -> Result<MapSnapshot, WireError> {
        let mut snap = MapSnapshot::default();
        for (k, v) in &raw.thread_stats {
            expect_len(k, 4)?;
            expect_len(v, THREAD_VALUE_SIZE)?;
            let mut sched = [0u64; 5];
            for (i, slot) in sched.iter_mut().enumerate() {
                *slot = u64_at(v, i * 8);
            }
            let comm = &v[44..60];
            let end = comm.iter().position(|b| *b == 0).unwrap_or(16);
            snap.threads.insert(
                u32_at(k, 0),
                ThreadStats { tgid: u32_at(v, 40), comm: String::from_utf8_lossy(&comm[..end]).into_owned(), sched },
            );
        }
        for (k, v) in &raw.res_stats {
            expect_len(k, RES_KEY_SIZE)?;
            expect_len(v, RES_VALUE_SIZE)?;
            let class = match k[4] {
                1 => ResClass::Pipe,
                2 => ResClass::Socket,
                3 => ResClass::FutexWait,
                4 => ResClass::FutexWake,
                5 => ResClass::Epoll,
                6 => ResClass::Device,
                c => return Err(WireError::BadTag { what: "resource class", value: c as u64 }),
            };
            let dir = match k[5] {
                0 => None,
                1 => Some(WaitDir::Read),
                2 => Some(WaitDir::Write),
                3 => Some(WaitDir::Poll),
                d => return Err(WireError::BadTag { what: "dir", value: d as u64 }),
            };
            snap.resources.insert(
                ResKey { tid: u32_at(k, 0), class, dir, bri_id: u64_at(k, 8) },
                ResValue { time_ns: u64_at(v, 0), count: u64_at(v, 8), tgid: u32_at(v, 16) },
            );
        }
        for (k, v) in &raw.epoll_files {
            expect_len(k, EPOLL_KEY_SIZE)?;
            expect_len(v, 8)?;
            snap.epoll_files.insert((u64_at(k, 0), u64_at(k, 8)), u64_at(v, 0));
        }
        for (k, v) in &raw.bri_table {
            expect_len(k, 8)?;
            expect_len(v, BRI_VALUE_SIZE)?;
            snap.bris.insert(u64_at(k, 0), decode_bri(trim_bri(v)?)?);
        }
        Ok(snap)
    }
}

/// Strips the zero padding after a wire-encoded resource.
fn trim_bri(v: &[u8]) -> Result<&[u8], WireError> {
    // Decode greedily: try every prefix length from the shortest valid one.
    for end in 1..=v.len() {
        if decode_bri(&v[..end]).is_ok() && v[end..].iter().all(|b| *b == 0) {
            return Ok(&v[..end]);
        }
    }
    Err(WireError::Invalid("undecodable resource slot".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_events;
    use crate::model::{EventKind, FutexOp, KernelEvent, NANOS_PER_SEC};

    const MS: u64 = 1_000_000;

    fn futex_waits() -> Vec<KernelEvent> {
        let t = ThreadRef::new(11, 10, "w");
        let enter = EventKind::FutexEnter { uaddr: 0x1000, op: FutexOp::Wait, val: 0, shared: false };
        let exit = EventKind::FutexExit { result: 0 };
        vec![
            KernelEvent::new(0, t.clone(), enter.clone()),
            KernelEvent::new(3 * MS, t.clone(), exit.clone()),
            KernelEvent::new(10 * MS, t.clone(), enter),
            KernelEvent::new(12 * MS, t, exit),
        ]
    }

    #[test]
    fn two_futex_waits_aggregate_into_one_entry() {
        let batches = run_events(NANOS_PER_SEC, &futex_waits()).unwrap();
        let snap = MapSnapshot::from_batch(&batches[0]);
        let (key, value) = snap.resources.iter().next().unwrap();
        assert_eq!(key.tid, 11);
        assert_eq!(key.class, ResClass::FutexWait);
        assert_eq!(snap.bris[&key.bri_id], Bri::futex(10, 0x1000, false));
        assert_eq!((value.time_ns, value.count), (5 * MS, 2));
    }

    #[test]
    fn byte_layout_round_trips() {
        let batches = run_events(NANOS_PER_SEC, &futex_waits()).unwrap();
        let snap = MapSnapshot::from_batch(&batches[0]);
        let raw = snap.encode().unwrap();
        assert!(raw.res_stats.iter().all(|(k, v)| k.len() == RES_KEY_SIZE && v.len() == RES_VALUE_SIZE));
        let back = MapSnapshot::decode(&raw).unwrap();
        assert_eq!(back, snap);
        let mut samples = back.to_samples(0, NANOS_PER_SEC).unwrap();
        let mut expected = batches[0].samples.clone();
        let order = |s: &MetricSample| (s.tid(), s.metric, s.resource.clone(), s.dir);
        samples.sort_by_key(order);
        expected.sort_by_key(order);
        assert_eq!(samples, expected);
    }

    #[test]
    fn wrong_entry_size_is_rejected() {
        let raw = RawMaps { epoll_files: vec![(vec![0; 15], vec![0; 8])], ..RawMaps::default() };
        assert!(MapSnapshot::decode(&raw).is_err());
    }
}
