use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{default_start_time, SimConfig, SimPeer};
use crate::logs::Timestamp;

/// Content description read by the simulated client in place of a
/// `.torrent` metainfo file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTorrent {
    pub name: String,
    pub length: u64,
    pub piece_length: u32,
    pub block_length: u32,
}

impl SimTorrent {
    pub fn load(path: &Path) -> Result<SimTorrent, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("serializable"))
    }
}

/// Everything about a swarm that is not in the torrent: the participants and
/// the choking parameters. Every simulated client of one experiment reads the
/// same roster, so they all compute the same swarm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    pub seed: u64,
    #[serde(default = "default_start_time")]
    pub start_time: Timestamp,
    #[serde(default = "one")]
    pub tick: u32,
    #[serde(default = "four")]
    pub unchoke_slots: usize,
    #[serde(default = "one_usize")]
    pub optimistic_slots: usize,
    #[serde(default = "ten")]
    pub rechoke_period: u32,
    #[serde(default = "max_ticks")]
    pub max_ticks: u32,
    pub peers: Vec<SimPeer>,
}

fn one() -> u32 {
    1
}
fn one_usize() -> usize {
    1
}
fn four() -> usize {
    4
}
fn ten() -> u32 {
    10
}
fn max_ticks() -> u32 {
    100_000
}

impl Roster {
    pub fn new(seed: u64, peers: Vec<SimPeer>) -> Roster {
        Roster {
            seed,
            start_time: default_start_time(),
            tick: 1,
            unchoke_slots: 4,
            optimistic_slots: 1,
            rechoke_period: 10,
            max_ticks: max_ticks(),
            peers,
        }
    }

    pub fn load(path: &Path) -> Result<Roster, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("serializable"))
    }

    pub fn to_config(&self, torrent: &SimTorrent) -> SimConfig {
        SimConfig {
            seed: self.seed,
            peers: self.peers.clone(),
            file_name: torrent.name.clone(),
            file_size: torrent.length,
            piece_size: torrent.piece_length,
            block_size: torrent.block_length,
            tick: self.tick,
            unchoke_slots: self.unchoke_slots,
            optimistic_slots: self.optimistic_slots,
            rechoke_period: self.rechoke_period,
            max_ticks: self.max_ticks,
            start_time: self.start_time,
        }
    }
}
