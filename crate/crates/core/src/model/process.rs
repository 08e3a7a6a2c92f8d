use std::fmt;

use serde::{Deserialize, Serialize};

use super::bri::Bri;
use super::event::Nanos;

/// The far side of a discovery edge: another local process, or an endpoint
/// outside the host.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Peer {
    Process(u32),
    External(String),
}

impl Peer {
    pub fn label(&self) -> String {
        match self {
            Peer::Process(tgid) => format!("tgid:{tgid}"),
            Peer::External(ep) => format!("external:{ep}"),
        }
    }

    pub fn parse_label(text: &str) -> Option<Peer> {
        if let Some(tgid) = text.strip_prefix("tgid:") {
            tgid.parse().ok().map(Peer::Process)
        } else {
            text.strip_prefix("external:").map(|ep| Peer::External(ep.to_string()))
        }
    }

    pub fn tgid(&self) -> Option<u32> {
        match self {
            Peer::Process(t) => Some(*t),
            Peer::External(_) => None,
        }
    }
}

impl fmt::Display for Peer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveryEdge {
    pub from_tgid: u32,
    pub to: Peer,
    pub via: Bri,
    pub first_seen: Nanos,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessMeta {
    pub tgid: u32,
    pub comm: String,
    pub first_seen: Nanos,
    pub parent_tgid: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadMeta {
    pub tid: u32,
    pub tgid: u32,
    pub comm: String,
    pub first_seen: Nanos,
}
