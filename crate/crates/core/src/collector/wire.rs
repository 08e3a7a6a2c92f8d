//! Binary event stream produced by the probe loader.
//!
//! The loader drains the kernel ring buffer and writes to its stdout:
//!
//! ```text
//! header:  "PLRB"  u32 version
//! record:  u32 len  (bytes that follow)
//!          u64 ts   u32 tid   u32 tgid   [u8; 16] comm (NUL padded)
//!          u8 kind  payload
//! ```
//!
//! All integers are little-endian. Payloads by kind:
//!
//! | kind | event            | payload                                               |
//! |------|------------------|-------------------------------------------------------|
//! | 1    | sched_switch_out | u8 next_state, u8 in_iowait                            |
//! | 2    | sched_switch_in  |                                                        |
//! | 3    | sched_wakeup     |                                                        |
//! | 4    | futex_enter      | u64 uaddr, u8 op, u32 val, u8 shared                   |
//! | 5    | futex_exit       | i64 result                                             |
//! | 6    | vfs_access       | bri, u8 dir, u8 file_kind, u8 blocking, u8 enter       |
//! | 7    | sock_access      | bri, u8 dir, u8 enter, u8 has_local, [endpoint]        |
//! | 8    | poll_enter       | u8 api, u16 n, n * bri                                 |
//! | 9    | poll_exit        | u8 api                                                 |
//! | 10   | epoll_ctl        | bri epoll, bri target, u8 action                       |
//! | 11   | epoll_wait_enter | bri epoll                                              |
//! | 12   | epoll_wait_exit  | bri epoll                                              |
//! | 13   | block_rq         | bri dev, u64 sectors                                   |
//! | 14   | meta             | u32 cpus                                               |
//!
//! A bri is a u8 tag followed by its fields: 1 vfs (u64 s_dev, u64 i_ino),
//! 2 socket (u8 family, endpoint a, endpoint b), 3 futex (u32 tgid, u64 uaddr,
//! u8 shared), 4 epoll (u64 kaddr), 5 block device (u32 major, u32 minor).
//! Families are 1 inet4, 2 inet6, 3 unix. An inet4 endpoint is 4 address
//! bytes and a u16 port, inet6 is 16 bytes and a u16 port, unix is a u16
//! length and that many UTF-8 bytes.
//!
//! Enumerations: next_state 0 running, 1 runnable, 2 sleep, 3 block, 4 dead;
//! futex op 0 wait, 1 wake; dir 0 read/recv, 1 write/send; file_kind 0 fifo,
//! 1 regular, 2 other; api 0 select, 1 poll; action 0 insert, 1 remove.

use std::io::{self, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use crate::error::WireError;
use crate::model::{
    Bri, Endpoint, EpollAction, EventKind, FileKind, FutexOp, IoDir, KernelEvent, NextState,
    PollApi, SockDir, SocketFamily, ThreadRef,
};

pub const MAGIC: [u8; 4] = *b"PLRB";
pub const VERSION: u32 = 1;
const MAX_RECORD: u32 = 1 << 20;

/// One decoded stream item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireRecord {
    Event(KernelEvent),
    Meta { cpus: u32 },
}

pub fn write_header<W: Write>(out: &mut W) -> io::Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())
}

/// Reads and checks the stream header.
pub fn read_header<R: Read>(input: &mut R) -> Result<(), WireError> {
    let mut head = [0u8; 8];
    input.read_exact(&mut head).map_err(|_| WireError::Truncated)?;
    let magic: [u8; 4] = head[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let found = u32::from_le_bytes(head[4..].try_into().unwrap());
    if found != VERSION {
        return Err(WireError::VersionMismatch { expected: VERSION, found });
    }
    Ok(())
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }

    fn endpoint(&mut self, e: &Endpoint) -> Result<(), WireError> {
        match e {
            Endpoint::Inet(SocketAddr::V4(a)) => {
                self.0.extend_from_slice(&a.ip().octets());
                self.u16(a.port());
            }
            Endpoint::Inet(SocketAddr::V6(a)) => {
                self.0.extend_from_slice(&a.ip().octets());
                self.u16(a.port());
            }
            Endpoint::Unix(path) => {
                let len = u16::try_from(path.len()).map_err(|_| WireError::Invalid("unix path too long".into()))?;
                self.u16(len);
                self.0.extend_from_slice(path.as_bytes());
            }
        }
        Ok(())
    }

    fn bri(&mut self, bri: &Bri) -> Result<(), WireError> {
        match bri {
            Bri::VfsInode { s_dev, i_ino } => {
                self.u8(1);
                self.u64(*s_dev);
                self.u64(*i_ino);
            }
            Bri::SocketTuple { family, a, b } => {
                self.u8(2);
                self.u8(match family {
                    SocketFamily::Inet4 => 1,
                    SocketFamily::Inet6 => 2,
                    SocketFamily::Unix => 3,
                });
                self.endpoint(a)?;
                self.endpoint(b)?;
            }
            Bri::FutexAddr { tgid, uaddr, shared } => {
                self.u8(3);
                self.u32(*tgid);
                self.u64(*uaddr);
                self.bool(*shared);
            }
            Bri::EpollObj { kaddr } => {
                self.u8(4);
                self.u64(*kaddr);
            }
            Bri::BlockDev { major, minor } => {
                self.u8(5);
                self.u32(*major);
                self.u32(*minor);
            }
        }
        Ok(())
    }
}

fn header_fields(enc: &mut Enc, ts: u64, thread: &ThreadRef, kind: u8) {
    enc.u64(ts);
    enc.u32(thread.tid);
    enc.u32(thread.tgid);
    let mut comm = [0u8; 16];
    let bytes = thread.comm.as_bytes();
    let n = bytes.len().min(15);
    comm[..n].copy_from_slice(&bytes[..n]);
    enc.0.extend_from_slice(&comm);
    enc.u8(kind);
}

/// Encodes one record including its length prefix.
pub fn encode_record(record: &WireRecord) -> Result<Vec<u8>, WireError> {
    let mut enc = Enc(Vec::with_capacity(64));
    match record {
        WireRecord::Meta { cpus } => {
            header_fields(&mut enc, 0, &ThreadRef { tid: 0, tgid: 0, comm: String::new() }, 14);
            enc.u32(*cpus);
        }
        WireRecord::Event(event) => {
            let code = match &event.kind {
                EventKind::SchedSwitchOut { .. } => 1,
                EventKind::SchedSwitchIn => 2,
                EventKind::SchedWakeup => 3,
                EventKind::FutexEnter { .. } => 4,
                EventKind::FutexExit { .. } => 5,
                EventKind::VfsAccess { .. } => 6,
                EventKind::SockAccess { .. } => 7,
                EventKind::PollEnter { .. } => 8,
                EventKind::PollExit { .. } => 9,
                EventKind::EpollCtl { .. } => 10,
                EventKind::EpollWaitEnter { .. } => 11,
                EventKind::EpollWaitExit { .. } => 12,
                EventKind::BlockRq { .. } => 13,
            };
            header_fields(&mut enc, event.ts, &event.thread, code);
            match &event.kind {
                EventKind::SchedSwitchOut { next_state, in_iowait } => {
                    enc.u8(match next_state {
                        NextState::Running => 0,
                        NextState::Runnable => 1,
                        NextState::Sleep => 2,
                        NextState::Block => 3,
                        NextState::Dead => 4,
                    });
                    enc.bool(*in_iowait);
                }
                EventKind::SchedSwitchIn | EventKind::SchedWakeup => {}
                EventKind::FutexEnter { uaddr, op, val, shared } => {
                    enc.u64(*uaddr);
                    enc.u8(matches!(op, FutexOp::Wake) as u8);
                    enc.u32(*val);
                    enc.bool(*shared);
                }
                EventKind::FutexExit { result } => enc.u64(*result as u64),
                EventKind::VfsAccess { bri, dir, file_kind, blocking, enter } => {
                    enc.bri(bri)?;
                    enc.u8(matches!(dir, IoDir::Write) as u8);
                    enc.u8(match file_kind {
                        FileKind::Fifo => 0,
                        FileKind::Regular => 1,
                        FileKind::Other => 2,
                    });
                    enc.bool(*blocking);
                    enc.bool(*enter);
                }
                EventKind::SockAccess { bri, dir, enter, local } => {
                    enc.bri(bri)?;
                    enc.u8(matches!(dir, SockDir::Send) as u8);
                    enc.bool(*enter);
                    enc.bool(local.is_some());
                    if let Some(local) = local {
                        enc.endpoint(local)?;
                    }
                }
                EventKind::PollEnter { api, bris } => {
                    enc.u8(matches!(api, PollApi::Poll) as u8);
                    let n = u16::try_from(bris.len()).map_err(|_| WireError::Invalid("too many poll files".into()))?;
                    enc.u16(n);
                    for bri in bris {
                        enc.bri(bri)?;
                    }
                }
                EventKind::PollExit { api } => enc.u8(matches!(api, PollApi::Poll) as u8),
                EventKind::EpollCtl { epoll, target, action } => {
                    enc.bri(epoll)?;
                    enc.bri(target)?;
                    enc.u8(matches!(action, EpollAction::Remove) as u8);
                }
                EventKind::EpollWaitEnter { epoll } | EventKind::EpollWaitExit { epoll } => enc.bri(epoll)?,
                EventKind::BlockRq { dev, sectors } => {
                    enc.bri(dev)?;
                    enc.u64(*sectors);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(enc.0.len() + 4);
    out.extend_from_slice(&(enc.0.len() as u32).to_le_bytes());
    out.extend_from_slice(&enc.0);
    Ok(out)
}

struct Dec<'a> {
    buf: &'a [u8],
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(WireError::BadTag { what: "bool", value: v as u64 }),
        }
    }
    fn tag<T>(&mut self, what: &'static str, options: &[T]) -> Result<T, WireError>
    where
        T: Copy,
    {
        let v = self.u8()?;
        options.get(v as usize).copied().ok_or(WireError::BadTag { what, value: v as u64 })
    }

    fn endpoint(&mut self, family: SocketFamily) -> Result<Endpoint, WireError> {
        Ok(match family {
            SocketFamily::Inet4 => {
                let ip: [u8; 4] = self.take(4)?.try_into().unwrap();
                Endpoint::Inet(SocketAddr::new(IpAddr::V4(Ipv4Addr::from(ip)), self.u16()?))
            }
            SocketFamily::Inet6 => {
                let ip: [u8; 16] = self.take(16)?.try_into().unwrap();
                Endpoint::Inet(SocketAddr::new(IpAddr::V6(Ipv6Addr::from(ip)), self.u16()?))
            }
            SocketFamily::Unix => {
                let n = self.u16()? as usize;
                let text = std::str::from_utf8(self.take(n)?).map_err(|e| WireError::Invalid(e.to_string()))?;
                Endpoint::Unix(text.to_string())
            }
        })
    }

    fn bri(&mut self) -> Result<Bri, WireError> {
        Ok(match self.u8()? {
            1 => Bri::VfsInode { s_dev: self.u64()?, i_ino: self.u64()? },
            2 => {
                let family = match self.u8()? {
                    1 => SocketFamily::Inet4,
                    2 => SocketFamily::Inet6,
                    3 => SocketFamily::Unix,
                    v => return Err(WireError::BadTag { what: "family", value: v as u64 }),
                };
                let a = self.endpoint(family)?;
                let b = self.endpoint(family)?;
                Bri::socket(family, a, b)
            }
            3 => {
                let tgid = self.u32()?;
                let uaddr = self.u64()?;
                Bri::futex(tgid, uaddr, self.bool()?)
            }
            4 => Bri::EpollObj { kaddr: self.u64()? },
            5 => Bri::BlockDev { major: self.u32()?, minor: self.u32()? },
            v => return Err(WireError::BadTag { what: "bri", value: v as u64 }),
        })
    }
}

/// Decodes one record body (without the length prefix).
pub fn decode_body(body: &[u8]) -> Result<WireRecord, WireError> {
    let mut d = Dec { buf: body };
    let ts = d.u64()?;
    let tid = d.u32()?;
    let tgid = d.u32()?;
    let comm_raw = d.take(16)?;
    let end = comm_raw.iter().position(|b| *b == 0).unwrap_or(16);
    let comm = String::from_utf8_lossy(&comm_raw[..end]).into_owned();
    let code = d.u8()?;
    let kind = match code {
        1 => EventKind::SchedSwitchOut {
            next_state: d.tag(
                "next_state",
                &[NextState::Running, NextState::Runnable, NextState::Sleep, NextState::Block, NextState::Dead],
            )?,
            in_iowait: d.bool()?,
        },
        2 => EventKind::SchedSwitchIn,
        3 => EventKind::SchedWakeup,
        4 => EventKind::FutexEnter {
            uaddr: d.u64()?,
            op: d.tag("futex op", &[FutexOp::Wait, FutexOp::Wake])?,
            val: d.u32()?,
            shared: d.bool()?,
        },
        5 => EventKind::FutexExit { result: d.u64()? as i64 },
        6 => EventKind::VfsAccess {
            bri: d.bri()?,
            dir: d.tag("dir", &[IoDir::Read, IoDir::Write])?,
            file_kind: d.tag("file_kind", &[FileKind::Fifo, FileKind::Regular, FileKind::Other])?,
            blocking: d.bool()?,
            enter: d.bool()?,
        },
        7 => {
            let bri = d.bri()?;
            let dir = d.tag("dir", &[SockDir::Recv, SockDir::Send])?;
            let enter = d.bool()?;
            let local = if d.bool()? {
                let Bri::SocketTuple { family, .. } = &bri else {
                    return Err(WireError::Invalid("sock_access on a non-socket resource".into()));
                };
                Some(d.endpoint(*family)?)
            } else {
                None
            };
            EventKind::SockAccess { bri, dir, enter, local }
        }
        8 => {
            let api = d.tag("api", &[PollApi::Select, PollApi::Poll])?;
            let n = d.u16()?;
            let bris = (0..n).map(|_| d.bri()).collect::<Result<_, _>>()?;
            EventKind::PollEnter { api, bris }
        }
        9 => EventKind::PollExit { api: d.tag("api", &[PollApi::Select, PollApi::Poll])? },
        10 => EventKind::EpollCtl {
            epoll: d.bri()?,
            target: d.bri()?,
            action: d.tag("action", &[EpollAction::Insert, EpollAction::Remove])?,
        },
        11 => EventKind::EpollWaitEnter { epoll: d.bri()? },
        12 => EventKind::EpollWaitExit { epoll: d.bri()? },
        13 => EventKind::BlockRq { dev: d.bri()?, sectors: d.u64()? },
        14 => {
            let cpus = d.u32()?;
            if !d.buf.is_empty() {
                return Err(WireError::Invalid("trailing bytes".into()));
            }
            return Ok(WireRecord::Meta { cpus });
        }
        v => return Err(WireError::BadTag { what: "kind", value: v as u64 }),
    };
    if !d.buf.is_empty() {
        return Err(WireError::Invalid(format!("{} trailing bytes", d.buf.len())));
    }
    Ok(WireRecord::Event(KernelEvent { ts, thread: ThreadRef { tid, tgid, comm }, kind }))
}

/// Wire encoding of a single resource identifier.
pub fn encode_bri(bri: &Bri) -> Result<Vec<u8>, WireError> {
    let mut enc = Enc(Vec::with_capacity(24));
    enc.bri(bri)?;
    Ok(enc.0)
}

pub fn decode_bri(bytes: &[u8]) -> Result<Bri, WireError> {
    let mut d = Dec { buf: bytes };
    let bri = d.bri()?;
    if !d.buf.is_empty() {
        return Err(WireError::Invalid("trailing bytes after resource".into()));
    }
    Ok(bri)
}

/// Iterates records of a stream whose header has already been read.
pub struct RecordReader<R> {
    input: R,
}

impl<R: Read> RecordReader<R> {
    /// Checks the header and returns a reader positioned at the first record.
    pub fn new(mut input: R) -> Result<Self, WireError> {
        read_header(&mut input)?;
        Ok(RecordReader { input })
    }

    /// Next record, `Ok(None)` at a clean end of stream.
    pub fn next_record(&mut self) -> Result<Option<WireRecord>, WireError> {
        let mut len = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match self.input.read(&mut len[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(WireError::Truncated),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(WireError::Invalid(e.to_string())),
            }
        }
        let len = u32::from_le_bytes(len);
        if len > MAX_RECORD {
            return Err(WireError::Invalid(format!("record length {len} too large")));
        }
        let mut body = vec![0u8; len as usize];
        self.input.read_exact(&mut body).map_err(|_| WireError::Truncated)?;
        decode_body(&body).map(Some)
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<WireRecord, WireError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

/// Encodes a whole stream: header, optional meta record, then events.
pub fn encode_stream(cpus: Option<u32>, events: &[KernelEvent]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    write_header(&mut out).expect("vec write");
    if let Some(cpus) = cpus {
        out.extend(encode_record(&WireRecord::Meta { cpus })?);
    }
    for event in events {
        out.extend(encode_record(&WireRecord::Event(event.clone()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::bri_of_file;

    fn ev(kind: EventKind) -> KernelEvent {
        KernelEvent::new(42, ThreadRef::new(7, 3, "worker"), kind)
    }

    #[test]
    fn every_kind_round_trips() {
        let sock = Bri::socket(
            SocketFamily::Inet6,
            Endpoint::Inet("[::1]:80".parse().unwrap()),
            Endpoint::Inet("[::1]:5000".parse().unwrap()),
        );
        let kinds = vec![
            EventKind::SchedSwitchOut { next_state: NextState::Block, in_iowait: true },
            EventKind::SchedSwitchIn,
            EventKind::SchedWakeup,
            EventKind::FutexEnter { uaddr: 0xdead_beef, op: FutexOp::Wake, val: 1, shared: true },
            EventKind::FutexExit { result: -11 },
            EventKind::VfsAccess { bri: bri_of_file(1, 2), dir: IoDir::Write, file_kind: FileKind::Fifo, blocking: true, enter: false },
            EventKind::SockAccess { bri: sock.clone(), dir: SockDir::Send, enter: true, local: Some(Endpoint::Inet("[::1]:80".parse().unwrap())) },
            EventKind::SockAccess {
                bri: Bri::socket(SocketFamily::Unix, Endpoint::Unix("/run/a|b".into()), Endpoint::Unix("ino:1:2".into())),
                dir: SockDir::Recv,
                enter: false,
                local: None,
            },
            EventKind::PollEnter { api: PollApi::Poll, bris: vec![bri_of_file(1, 2), sock] },
            EventKind::PollExit { api: PollApi::Select },
            EventKind::EpollCtl { epoll: Bri::EpollObj { kaddr: 0xffff_8880 }, target: bri_of_file(1, 2), action: EpollAction::Remove },
            EventKind::EpollWaitEnter { epoll: Bri::EpollObj { kaddr: 1 } },
            EventKind::EpollWaitExit { epoll: Bri::EpollObj { kaddr: 1 } },
            EventKind::BlockRq { dev: Bri::BlockDev { major: 259, minor: 1 }, sectors: 8 },
        ];
        let events: Vec<_> = kinds.into_iter().map(ev).collect();
        let bytes = encode_stream(Some(4), &events).unwrap();
        let decoded: Vec<_> = RecordReader::new(&bytes[..]).unwrap().collect::<Result<_, _>>().unwrap();
        assert_eq!(decoded[0], WireRecord::Meta { cpus: 4 });
        let back: Vec<_> = decoded[1..]
            .iter()
            .map(|r| match r {
                WireRecord::Event(e) => e.clone(),
                other => panic!("unexpected {other:?}"),
            })
            .collect();
        assert_eq!(back, events);
    }

    #[test]
    fn version_mismatch_is_fatal() {
        let mut bytes = encode_stream(None, &[]).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            RecordReader::new(&bytes[..]),
            Err(WireError::VersionMismatch { expected: 1, found: 2 })
        ));
        assert!(matches!(RecordReader::new(&b"XXXX\x01\0\0\0"[..]), Err(WireError::BadMagic(_))));
    }

    #[test]
    fn truncated_and_unknown_records_fail() {
        let bytes = encode_stream(None, &[ev(EventKind::SchedSwitchIn)]).unwrap();
        let cut = &bytes[..bytes.len() - 1];
        let mut r = RecordReader::new(cut).unwrap();
        assert_eq!(r.next_record(), Err(WireError::Truncated));

        let mut bad = bytes.clone();
        let kind_at = 8 + 4 + 8 + 4 + 4 + 16;
        bad[kind_at] = 99;
        let mut r = RecordReader::new(&bad[..]).unwrap();
        assert_eq!(r.next_record(), Err(WireError::BadTag { what: "kind", value: 99 }));
    }
}
