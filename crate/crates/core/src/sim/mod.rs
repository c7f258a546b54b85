//! Deterministic discrete-time swarm model.
//!
//! The simulator plays the part of an instrumented BitTorrent client. Every
//! peer of the swarm is modelled in one loop; the output is a per-peer status
//! series and a global stream of protocol messages, which [`emit`] turns into
//! status and verbose log files in either dialect.
//!
//! Per tick, in this order: joins and departures (bitfield exchange on first
//! contact), interest updates, choking (a full rechoke every
//! `rechoke_period` ticks, otherwise free slots are filled), request
//! pipelining with rarest-first piece selection, block transfers under both
//! peers' caps, and finally the status snapshot.

mod emit;
mod engine;
mod manifest;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logs::{Direction, MessageKind, StatusRecord, Timestamp, VerboseRecord};

pub use emit::{emit_logs, emit_peer_logs, stream_peer_logs, LogPaths};
pub use engine::simulate;
pub use manifest::{Roster, SimTorrent};

/// Remaining-block fraction below which a leecher enters endgame mode.
pub const ENDGAME_FRACTION: f64 = 0.05;
/// Upper bound of the per-link outstanding request window, in blocks.
pub const MAX_REQUEST_WINDOW: u32 = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("swarm has no seeder")]
    Unsatisfiable,
    #[error("leechers still incomplete after {0} ticks")]
    TickBoundExceeded(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seeder,
    Leecher,
}

impl Role {
    pub fn token(self) -> &'static str {
        match self {
            Role::Seeder => "seeder",
            Role::Leecher => "leecher",
        }
    }

    pub fn from_token(s: &str) -> Option<Role> {
        match s {
            "seeder" => Some(Role::Seeder),
            "leecher" => Some(Role::Leecher),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimPeer {
    pub peer_id: String,
    /// Synthetic `ip:port`, used as the remote column of other peers' logs.
    pub addr: String,
    pub role: Role,
    /// Bytes per second.
    pub down_cap: u64,
    pub up_cap: u64,
    pub start_tick: u32,
    pub stop_tick: Option<u32>,
    /// Regular unchoke slots of this peer; `None` uses
    /// [`SimConfig::unchoke_slots`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upload_slots: Option<usize>,
}

impl SimPeer {
    pub fn new(peer_id: &str, addr: &str, role: Role, down_cap: u64, up_cap: u64) -> Self {
        SimPeer {
            peer_id: peer_id.to_string(),
            addr: addr.to_string(),
            role,
            down_cap,
            up_cap,
            start_tick: 0,
            stop_tick: None,
            upload_slots: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub peers: Vec<SimPeer>,
    pub file_name: String,
    pub file_size: u64,
    pub piece_size: u32,
    pub block_size: u32,
    /// Seconds per tick.
    pub tick: u32,
    pub unchoke_slots: usize,
    pub optimistic_slots: usize,
    /// Ticks between full rechokes.
    pub rechoke_period: u32,
    pub max_ticks: u32,
    /// Wall-clock time of tick 0.
    pub start_time: Timestamp,
}

impl SimConfig {
    /// Defaults for everything but the peers and content geometry.
    pub fn new(seed: u64, peers: Vec<SimPeer>, file_size: u64, piece_size: u32, block_size: u32) -> Self {
        SimConfig {
            seed,
            peers,
            file_name: "content.bin".to_string(),
            file_size,
            piece_size,
            block_size,
            tick: 1,
            unchoke_slots: 4,
            optimistic_slots: 1,
            rechoke_period: 10,
            max_ticks: 100_000,
            start_time: default_start_time(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.file_size == 0 {
            return bad("file_size must be positive");
        }
        if self.block_size == 0 || self.piece_size == 0 || !self.piece_size.is_multiple_of(self.block_size) {
            return bad("piece_size must be a positive multiple of block_size");
        }
        if self.tick == 0 || self.rechoke_period == 0 {
            return bad("tick and rechoke_period must be positive");
        }
        if self.unchoke_slots == 0 || self.optimistic_slots == 0 {
            return bad("unchoke and optimistic slots must be at least 1");
        }
        if self.file_size.div_ceil(u64::from(self.piece_size)) > u64::from(u32::MAX) {
            return bad("too many pieces");
        }
        let mut ids = std::collections::BTreeSet::new();
        let mut addrs = std::collections::BTreeSet::new();
        for peer in &self.peers {
            if !ids.insert(peer.peer_id.as_str()) {
                return bad(&format!("duplicate peer id {}", peer.peer_id));
            }
            if !addrs.insert(peer.addr.as_str()) {
                return bad(&format!("duplicate peer address {}", peer.addr));
            }
            if peer.down_cap == 0 || peer.up_cap == 0 {
                return bad(&format!("peer {} has a zero cap", peer.peer_id));
            }
            if peer.upload_slots == Some(0) {
                return bad(&format!("peer {} has no upload slots", peer.peer_id));
            }
            if peer.stop_tick.is_some_and(|stop| stop <= peer.start_tick) {
                return bad(&format!("peer {} stops before it starts", peer.peer_id));
            }
        }
        if !self.peers.iter().any(|p| p.role == Role::Seeder) {
            return Err(SimError::Unsatisfiable);
        }
        Ok(())
    }

    pub fn num_pieces(&self) -> u32 {
        self.file_size.div_ceil(u64::from(self.piece_size)) as u32
    }

    pub fn num_blocks(&self) -> u64 {
        let full = self.file_size / u64::from(self.piece_size);
        let tail = self.file_size % u64::from(self.piece_size);
        full * u64::from(self.piece_size / self.block_size) + tail.div_ceil(u64::from(self.block_size))
    }

    pub fn timestamp(&self, tick: u32) -> Timestamp {
        self.start_time.offset(i64::from(tick) * i64::from(self.tick))
    }

    pub fn upload_slots(&self, peer: usize) -> usize {
        self.peers[peer].upload_slots.unwrap_or(self.unchoke_slots)
    }

    pub fn peer_index(&self, peer_id: &str) -> Option<usize> {
        self.peers.iter().position(|p| p.peer_id == peer_id)
    }
}

pub fn default_start_time() -> Timestamp {
    // 2010-03-01T10:00:00Z
    Timestamp(1_267_437_600)
}

/// One protocol message, from the sender's point of view. Peers are
/// indices into [`SimConfig::peers`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SimEvent {
    pub tick: u32,
    pub from: usize,
    pub to: usize,
    pub kind: MessageKind,
    pub piece_index: Option<u32>,
    pub block_offset: Option<u32>,
    pub block_length: Option<u32>,
    /// Piece bitmap, most significant bit first, as on the wire.
    pub bitfield: Option<Vec<u8>>,
}

impl SimEvent {
    /// The record this event leaves in the log of `viewer`, which must be
    /// either the sender or the receiver.
    pub fn record_for(&self, config: &SimConfig, viewer: usize) -> VerboseRecord {
        let (direction, remote) = if viewer == self.from {
            (Direction::Sent, self.to)
        } else {
            debug_assert_eq!(viewer, self.to);
            (Direction::Received, self.from)
        };
        VerboseRecord {
            timestamp: config.timestamp(self.tick),
            direction,
            kind: self.kind,
            remote_peer: config.peers[remote].addr.clone(),
            piece_index: self.piece_index,
            block_offset: self.block_offset,
            block_length: self.block_length,
            bitfield_hex: self.bitfield.as_ref().map(|b| to_hex(b)),
        }
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug, Clone)]
pub struct SimResult {
    /// Per peer, one record per tick the peer was in the swarm.
    pub status: Vec<Vec<StatusRecord>>,
    pub events: Vec<SimEvent>,
    /// Tick at which each leecher held the whole file.
    pub completed_at: Vec<Option<u32>>,
    pub ticks: u32,
}

impl SimResult {
    /// Events in the log of one peer, in emission order.
    pub fn events_for(&self, peer: usize) -> impl Iterator<Item = &SimEvent> {
        self.events.iter().filter(move |e| e.from == peer || e.to == peer)
    }

    /// Verbose records of one peer, in log order.
    pub fn records_for(&self, config: &SimConfig, peer: usize) -> Vec<VerboseRecord> {
        self.events_for(peer).map(|e| e.record_for(config, peer)).collect()
    }
}
