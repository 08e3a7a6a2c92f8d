//! A small workload with known contention: one pair of threads handing a
//! futex-backed lock back and forth, and one pair talking over a pipe.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

const HOLD: Duration = Duration::from_millis(2);
const PIPE_PERIOD: Duration = Duration::from_millis(5);

/// Runs until `duration` elapses or `stop` is raised. Returns the number of
/// lock handoffs and pipe messages.
pub fn run(duration: Option<Duration>, stop: Arc<AtomicBool>) -> std::io::Result<(u64, u64)> {
    let deadline = duration.map(|d| Instant::now() + d);
    let done = {
        let stop = stop.clone();
        move || stop.load(Ordering::SeqCst) || deadline.is_some_and(|d| Instant::now() >= d)
    };

    let turn = Arc::new((Mutex::new(0u8), Condvar::new()));
    let mut players = Vec::new();
    for me in 0..2u8 {
        let turn = turn.clone();
        let done = done.clone();
        players.push(thread::Builder::new().name(format!("pingpong-{me}")).spawn(move || {
            let mut handoffs = 0u64;
            let (lock, cv) = &*turn;
            while !done() {
                let mut t = lock.lock().unwrap();
                while *t != me && !done() {
                    t = cv.wait_timeout(t, Duration::from_millis(50)).unwrap().0;
                }
                thread::sleep(HOLD);
                *t = 1 - me;
                handoffs += 1;
                cv.notify_all();
            }
            cv.notify_all();
            handoffs
        })?);
    }

    let (mut rx, mut tx) = std::io::pipe()?;
    let writer = {
        let done = done.clone();
        thread::Builder::new().name("pipe-writer".into()).spawn(move || {
            let mut sent = 0u64;
            while !done() {
                if tx.write_all(&[1u8; 64]).is_err() {
                    break;
                }
                sent += 1;
                thread::sleep(PIPE_PERIOD);
            }
            sent
        })?
    };
    let reader = thread::Builder::new().name("pipe-reader".into()).spawn(move || {
        let mut buf = [0u8; 64];
        while let Ok(n) = rx.read(&mut buf) {
            if n == 0 {
                break;
            }
        }
    })?;

    let handoffs = players.into_iter().map(|p| p.join().unwrap_or(0)).sum();
    let sent = writer.join().unwrap_or(0);
    let _ = reader.join();
    Ok((handoffs, sent))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_pairs_make_progress() {
        let (handoffs, sent) = run(Some(Duration::from_millis(200)), Arc::new(AtomicBool::new(false))).unwrap();
        assert!(handoffs > 10, "{handoffs}");
        assert!(sent > 5, "{sent}");
    }
}
