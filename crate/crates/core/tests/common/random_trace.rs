//! Random synthetic traces: up to 8 threads, up to 16 resources, arbitrary
//! interleavings including orphans, replaced enters and boundary-crossing
//! waits.

use prismlike_core::model::{
    bri_of_file, Bri, Endpoint, EpollAction, EventKind, FileKind, FutexOp, IoDir, KernelEvent,
    Nanos, NextState, PollApi, SockDir, SocketFamily, ThreadRef,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Pool {
    pub pipes: Vec<Bri>,
    pub sockets: Vec<(Bri, Endpoint)>,
    pub futexes: Vec<u64>,
    pub epolls: Vec<Bri>,
    pub devices: Vec<Bri>,
}

fn pool(rng: &mut ChaCha8Rng) -> Pool {
    // 16 resources split across the five kinds
    let n_pipes = rng.random_range(1..=4);
    let n_socks = rng.random_range(1..=4);
    let n_futex = rng.random_range(1..=4);
    let n_epoll = rng.random_range(1..=2);
    let n_dev = (16 - n_pipes - n_socks - n_futex - n_epoll).clamp(1, 2);
    let sockets = (0..n_socks)
        .map(|i| {
            let local = Endpoint::Inet(format!("10.0.0.1:{}", 5000 + i).parse().unwrap());
            let remote = Endpoint::Inet(format!("10.0.0.{}:3306", 2 + i).parse().unwrap());
            (Bri::socket(SocketFamily::Inet4, local.clone(), remote), local)
        })
        .collect();
    Pool {
        pipes: (0..n_pipes).map(|i| bri_of_file(12, 100 + i as u64)).collect(),
        sockets,
        futexes: (0..n_futex).map(|i| 0x7f00_0000 + 8 * i as u64).collect(),
        epolls: (0..n_epoll).map(|i| Bri::EpollObj { kaddr: 0xffff_8880_0000_0000 + i as u64 }).collect(),
        devices: (0..n_dev).map(|i| Bri::BlockDev { major: 259, minor: i as u32 }).collect(),
    }
}

pub fn generate(seed: u64, max_events: usize) -> Vec<KernelEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_threads = rng.random_range(1..=8u32);
    let n_events = rng.random_range(0..=max_events);
    let pool = pool(&mut rng);
    let threads: Vec<ThreadRef> = (0..n_threads)
        .map(|i| ThreadRef::new(1000 + i, if i % 2 == 0 { 10 } else { 20 }, format!("w{i}")))
        .collect();
    let mut ts: Nanos = rng.random_range(0..3_000_000_000);
    let mut events = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        // ties are deliberate
        if rng.random_bool(0.85) {
            ts += rng.random_range(0..60_000_000);
        }
        let thread = threads[rng.random_range(0..threads.len())].clone();
        let pick = |rng: &mut ChaCha8Rng, n: usize| rng.random_range(0..n);
        let kind = match rng.random_range(0..20) {
            0..=2 => EventKind::SchedSwitchOut {
                next_state: [NextState::Running, NextState::Runnable, NextState::Sleep, NextState::Block, NextState::Block, NextState::Dead]
                    [rng.random_range(0..6)],
                in_iowait: rng.random_bool(0.5),
            },
            3..=4 => EventKind::SchedSwitchIn,
            5 => EventKind::SchedWakeup,
            6 => EventKind::FutexEnter {
                uaddr: pool.futexes[pick(&mut rng, pool.futexes.len())],
                op: if rng.random_bool(0.6) { FutexOp::Wait } else { FutexOp::Wake },
                val: 1,
                shared: rng.random_bool(0.2),
            },
            7 => EventKind::FutexExit { result: rng.random_range(-1..3) },
            8..=9 => EventKind::VfsAccess {
                bri: pool.pipes[pick(&mut rng, pool.pipes.len())].clone(),
                dir: if rng.random_bool(0.5) { IoDir::Read } else { IoDir::Write },
                file_kind: [FileKind::Fifo, FileKind::Fifo, FileKind::Regular, FileKind::Other][rng.random_range(0..4)],
                blocking: rng.random_bool(0.8),
                enter: rng.random_bool(0.5),
            },
            10..=11 => {
                let (bri, local) = pool.sockets[pick(&mut rng, pool.sockets.len())].clone();
                EventKind::SockAccess {
                    bri,
                    dir: if rng.random_bool(0.5) { SockDir::Recv } else { SockDir::Send },
                    enter: rng.random_bool(0.5),
                    local: Some(local),
                }
            }
            12 => {
                let mut bris = Vec::new();
                for _ in 0..rng.random_range(0..5) {
                    bris.push(match rng.random_range(0..3) {
                        0 => pool.pipes[pick(&mut rng, pool.pipes.len())].clone(),
                        1 => pool.sockets[pick(&mut rng, pool.sockets.len())].0.clone(),
                        _ => Bri::futex(10, pool.futexes[0], false),
                    });
                }
                EventKind::PollEnter { api: PollApi::Poll, bris }
            }
            13 => EventKind::PollExit { api: PollApi::Select },
            14..=15 => {
                let target = if rng.random_bool(0.5) {
                    pool.pipes[pick(&mut rng, pool.pipes.len())].clone()
                } else {
                    pool.sockets[pick(&mut rng, pool.sockets.len())].0.clone()
                };
                EventKind::EpollCtl {
                    epoll: pool.epolls[pick(&mut rng, pool.epolls.len())].clone(),
                    target,
                    action: if rng.random_bool(0.6) { EpollAction::Insert } else { EpollAction::Remove },
                }
            }
            16 => EventKind::EpollWaitEnter { epoll: pool.epolls[pick(&mut rng, pool.epolls.len())].clone() },
            17 => EventKind::EpollWaitExit { epoll: pool.epolls[pick(&mut rng, pool.epolls.len())].clone() },
            _ => EventKind::BlockRq {
                dev: pool.devices[pick(&mut rng, pool.devices.len())].clone(),
                sectors: rng.random_range(1..256),
            },
        };
        events.push(KernelEvent::new(ts, thread, kind));
    }
    events
}
