//! Backing resource identifiers.
//!
//! A BRI names the kernel object behind a file descriptor or a
//! synchronization address. Two descriptors that reach the same object get
//! equal BRIs, which is what lets wait time be attributed across threads.

use std::cmp::Ordering;
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SocketFamily {
    Inet4,
    Inet6,
    Unix,
}

impl SocketFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            SocketFamily::Inet4 => "inet4",
            SocketFamily::Inet6 => "inet6",
            SocketFamily::Unix => "unix",
        }
    }

    pub fn is_inet(self) -> bool {
        matches!(self, SocketFamily::Inet4 | SocketFamily::Inet6)
    }
}

impl FromStr for SocketFamily {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inet4" | "inet" | "af_inet" => Ok(SocketFamily::Inet4),
            "inet6" | "af_inet6" => Ok(SocketFamily::Inet6),
            "unix" | "af_unix" => Ok(SocketFamily::Unix),
            other => Err(ModelError::UnsupportedFamily(other.to_string())),
        }
    }
}

/// One side of a socket connection.
///
/// Unix-domain endpoints are opaque strings: a bound path, or an
/// `ino:<s_dev>:<i_ino>` pair for unnamed sockets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Inet(SocketAddr),
    Unix(String),
}

impl Endpoint {
    pub fn parse(family: SocketFamily, text: &str) -> Result<Self, ModelError> {
        match family {
            SocketFamily::Inet4 => match text.parse::<SocketAddr>() {
                Ok(addr @ SocketAddr::V4(_)) => Ok(Endpoint::Inet(addr)),
                _ => Err(ModelError::MalformedEndpoint(text.to_string())),
            },
            SocketFamily::Inet6 => match text.parse::<SocketAddr>() {
                Ok(addr @ SocketAddr::V6(_)) => Ok(Endpoint::Inet(addr)),
                _ => Err(ModelError::MalformedEndpoint(text.to_string())),
            },
            SocketFamily::Unix => {
                if text.is_empty() {
                    Err(ModelError::MalformedEndpoint(text.to_string()))
                } else {
                    Ok(Endpoint::Unix(text.to_string()))
                }
            }
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Inet(addr) => write!(f, "{addr}"),
            Endpoint::Unix(path) => f.write_str(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BriKind {
    Pipe,
    Socket,
    Futex,
    Epoll,
    Device,
}

/// Backing Resource Identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bri {
    /// Pipes, FIFOs, regular files: the inode plus its superblock device.
    VfsInode { s_dev: u64, i_ino: u64 },
    /// Endpoints are stored in canonical order (smaller endpoint first).
    SocketTuple { family: SocketFamily, a: Endpoint, b: Endpoint },
    /// `tgid` is 0 for shared futexes, which are keyed by address only.
    FutexAddr { tgid: u32, uaddr: u64, shared: bool },
    /// Address of the kernel eventpoll object.
    EpollObj { kaddr: u64 },
    BlockDev { major: u32, minor: u32 },
}

/// BRI of the file behind a descriptor. Read and write ends of one pipe share
/// the inode and so share the BRI.
pub fn bri_of_file(s_dev: u64, i_ino: u64) -> Bri {
    Bri::VfsInode { s_dev, i_ino }
}

/// BRI of a socket connection, identical for both peers.
pub fn canonicalize_socket(family: &str, local: &str, remote: &str) -> Result<Bri, ModelError> {
    let family: SocketFamily = family.parse()?;
    let local = Endpoint::parse(family, local)?;
    let remote = Endpoint::parse(family, remote)?;
    Ok(Bri::socket(family, local, remote))
}

impl Bri {
    pub fn socket(family: SocketFamily, x: Endpoint, y: Endpoint) -> Bri {
        let (a, b) = match x.cmp(&y) {
            Ordering::Greater => (y, x),
            _ => (x, y),
        };
        Bri::SocketTuple { family, a, b }
    }

    pub fn futex(tgid: u32, uaddr: u64, shared: bool) -> Bri {
        Bri::FutexAddr {
            tgid: if shared { 0 } else { tgid },
            uaddr,
            shared,
        }
    }

    pub fn kind(&self) -> BriKind {
        match self {
            Bri::VfsInode { .. } => BriKind::Pipe,
            Bri::SocketTuple { .. } => BriKind::Socket,
            Bri::FutexAddr { .. } => BriKind::Futex,
            Bri::EpollObj { .. } => BriKind::Epoll,
            Bri::BlockDev { .. } => BriKind::Device,
        }
    }

    /// Futexes, pipes and sockets carry inter-thread communication.
    pub fn is_ipc(&self) -> bool {
        matches!(self.kind(), BriKind::Pipe | BriKind::Socket | BriKind::Futex)
    }

    pub fn is_inet_socket(&self) -> bool {
        matches!(self, Bri::SocketTuple { family, .. } if family.is_inet())
    }

    /// The endpoint of this socket that is not `local`, if `local` is one of them.
    pub fn peer_of(&self, local: &Endpoint) -> Option<&Endpoint> {
        match self {
            Bri::SocketTuple { a, b, .. } if a == local => Some(b),
            Bri::SocketTuple { a, b, .. } if b == local => Some(a),
            _ => None,
        }
    }

    /// Stable text encoding used as `bri_key` in the store and in traces.
    pub fn key(&self) -> String {
        match self {
            Bri::VfsInode { s_dev, i_ino } => format!("vfs:{s_dev}:{i_ino}"),
            Bri::SocketTuple { family, a, b } => format!(
                "sock:{}:{}|{}",
                family.as_str(),
                escape_endpoint(a),
                escape_endpoint(b)
            ),
            Bri::FutexAddr { shared: true, uaddr, .. } => format!("futex:shared:{uaddr:#x}"),
            Bri::FutexAddr { tgid, uaddr, .. } => format!("futex:{tgid}:{uaddr:#x}"),
            Bri::EpollObj { kaddr } => format!("epoll:{kaddr:#x}"),
            Bri::BlockDev { major, minor } => format!("dev:{major}:{minor}"),
        }
    }

    pub fn parse_key(key: &str) -> Result<Bri, ModelError> {
        let bad = || ModelError::BadBriKey(key.to_string());
        let (tag, rest) = key.split_once(':').ok_or_else(bad)?;
        match tag {
            "vfs" => {
                let (dev, ino) = rest.split_once(':').ok_or_else(bad)?;
                Ok(Bri::VfsInode {
                    s_dev: dev.parse().map_err(|_| bad())?,
                    i_ino: ino.parse().map_err(|_| bad())?,
                })
            }
            "sock" => {
                let (family, pair) = rest.split_once(':').ok_or_else(bad)?;
                let family: SocketFamily = family.parse()?;
                let (a, b) = pair.split_once('|').ok_or_else(bad)?;
                let a = Endpoint::parse(family, &unescape_endpoint(a).ok_or_else(bad)?)?;
                let b = Endpoint::parse(family, &unescape_endpoint(b).ok_or_else(bad)?)?;
                Ok(Bri::socket(family, a, b))
            }
            "futex" => {
                let (scope, addr) = rest.split_once(':').ok_or_else(bad)?;
                let uaddr = parse_hex(addr).ok_or_else(bad)?;
                if scope == "shared" {
                    Ok(Bri::futex(0, uaddr, true))
                } else {
                    Ok(Bri::futex(scope.parse().map_err(|_| bad())?, uaddr, false))
                }
            }
            "epoll" => Ok(Bri::EpollObj {
                kaddr: parse_hex(rest).ok_or_else(bad)?,
            }),
            "dev" => {
                let (major, minor) = rest.split_once(':').ok_or_else(bad)?;
                Ok(Bri::BlockDev {
                    major: major.parse().map_err(|_| bad())?,
                    minor: minor.parse().map_err(|_| bad())?,
                })
            }
            _ => Err(bad()),
        }
    }
}

fn parse_hex(text: &str) -> Option<u64> {
    let digits = text.strip_prefix("0x")?;
    u64::from_str_radix(digits, 16).ok()
}

// Unix endpoints are arbitrary strings; '%' and '|' are percent-escaped so the
// pair separator stays unambiguous.
fn escape_endpoint(ep: &Endpoint) -> String {
    match ep {
        Endpoint::Inet(addr) => addr.to_string(),
        Endpoint::Unix(path) => {
            let mut out = String::with_capacity(path.len());
            for c in path.chars() {
                match c {
                    '%' => out.push_str("%25"),
                    '|' => out.push_str("%7C"),
                    c => out.push(c),
                }
            }
            out
        }
    }
}

fn unescape_endpoint(text: &str) -> Option<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('%') {
        out.push_str(&rest[..pos]);
        let code = rest.get(pos + 1..pos + 3)?;
        match code {
            "25" => out.push('%'),
            "7C" => out.push('|'),
            _ => return None,
        }
        rest = &rest[pos + 3..];
    }
    out.push_str(rest);
    Some(out)
}

impl fmt::Display for Bri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl Serialize for Bri {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for Bri {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Bri::parse_key(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn file_bri_is_deterministic_and_injective() {
        assert_eq!(bri_of_file(41, 1337), bri_of_file(41, 1337));
        assert_eq!(bri_of_file(41, 1337), Bri::VfsInode { s_dev: 41, i_ino: 1337 });
        assert_ne!(bri_of_file(41, 1337), bri_of_file(41, 1338));
    }

    #[test]
    fn pipe_ends_share_a_bri() {
        // read end and write end resolve to the same inode
        let read_end = bri_of_file(12, 99_001);
        let write_end = bri_of_file(12, 99_001);
        assert_eq!(read_end, write_end);
    }

    #[test]
    fn socket_peers_canonicalize_to_one_bri() {
        let x = canonicalize_socket("inet4", "10.0.0.1:5000", "10.0.0.2:3306").unwrap();
        let y = canonicalize_socket("inet4", "10.0.0.2:3306", "10.0.0.1:5000").unwrap();
        assert_eq!(x, y);
        assert_eq!(x, canonicalize_socket("inet4", "10.0.0.1:5000", "10.0.0.2:3306").unwrap());
        // oracle: the smaller endpoint by address ordering sits first
        let lo: SocketAddr = "10.0.0.1:5000".parse().unwrap();
        match x {
            Bri::SocketTuple { a: Endpoint::Inet(a), .. } => assert_eq!(a, lo),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unix_sockets_use_inode_style_identity() {
        let x = canonicalize_socket("unix", "ino:8:4411", "ino:8:4412").unwrap();
        let y = canonicalize_socket("unix", "ino:8:4412", "ino:8:4411").unwrap();
        assert_eq!(x, y);
        assert!(!x.is_inet_socket());
        assert_eq!(x.kind(), BriKind::Socket);
    }

    #[test]
    fn unsupported_family_and_bad_endpoints() {
        assert!(matches!(
            canonicalize_socket("netlink", "a", "b"),
            Err(ModelError::UnsupportedFamily(_))
        ));
        assert!(matches!(
            canonicalize_socket("inet4", "[::1]:80", "10.0.0.1:1"),
            Err(ModelError::MalformedEndpoint(_))
        ));
    }

    #[test]
    fn futex_scoping() {
        assert_ne!(Bri::futex(10, 0x1000, false), Bri::futex(11, 0x1000, false));
        assert_eq!(Bri::futex(10, 0x1000, true), Bri::futex(11, 0x1000, true));
    }

    #[test]
    fn epoll_identity_is_the_kernel_address() {
        let e = Bri::EpollObj { kaddr: 0xffff_8880_1234_5678 };
        assert_eq!(e.key(), "epoll:0xffff888012345678");
        assert_eq!(Bri::parse_key(&e.key()).unwrap(), e);
    }

    fn arb_endpoint(family: SocketFamily) -> BoxedStrategy<Endpoint> {
        match family {
            SocketFamily::Inet4 => (any::<[u8; 4]>(), any::<u16>())
                .prop_map(|(ip, port)| Endpoint::Inet(SocketAddr::from((ip, port))))
                .boxed(),
            SocketFamily::Inet6 => (any::<[u16; 8]>(), any::<u16>())
                .prop_map(|(ip, port)| Endpoint::Inet(SocketAddr::from((ip, port))))
                .boxed(),
            SocketFamily::Unix => "[a-z/%|._-]{1,12}".prop_map(Endpoint::Unix).boxed(),
        }
    }

    fn arb_bri() -> impl Strategy<Value = Bri> {
        prop_oneof![
            (any::<u64>(), any::<u64>()).prop_map(|(d, i)| bri_of_file(d, i)),
            prop_oneof![
                Just(SocketFamily::Inet4),
                Just(SocketFamily::Inet6),
                Just(SocketFamily::Unix)
            ]
            .prop_flat_map(|f| (Just(f), arb_endpoint(f), arb_endpoint(f)))
            .prop_map(|(f, a, b)| Bri::socket(f, a, b)),
            (any::<u32>(), any::<u64>(), any::<bool>()).prop_map(|(t, u, s)| Bri::futex(t, u, s)),
            any::<u64>().prop_map(|kaddr| Bri::EpollObj { kaddr }),
            (any::<u32>(), any::<u32>()).prop_map(|(major, minor)| Bri::BlockDev { major, minor }),
        ]
    }

    proptest! {
        #[test]
        fn key_round_trip(bri in arb_bri()) {
            let key = bri.key();
            prop_assert_eq!(Bri::parse_key(&key).unwrap(), bri);
        }

        #[test]
        fn socket_order_does_not_matter(a in arb_endpoint(SocketFamily::Inet4), b in arb_endpoint(SocketFamily::Inet4)) {
            prop_assert_eq!(
                Bri::socket(SocketFamily::Inet4, a.clone(), b.clone()),
                Bri::socket(SocketFamily::Inet4, b, a)
            );
        }
    }
}
