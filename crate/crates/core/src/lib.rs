//! Swarm orchestration and analysis toolkit for BitTorrent experiments.
//!
//! The crate is organised around the flow of an experiment:
//!
//! * [`config`] loads the node inventory and swarm plan,
//! * [`commander`] drives per-node [`agent`] daemons over the [`wire`] protocol,
//! * agents run BitTorrent clients through [`adapters`]; the [`sim`] module is a
//!   deterministic swarm model that stands in for an instrumented client,
//! * client status and verbose logs are read by [`logs`], ingested into a
//!   single-file [`store`], and turned into series and statistics by [`analysis`].

pub mod adapters;
pub mod agent;
pub mod analysis;
pub mod commander;
pub mod config;
pub mod logs;
pub mod sim;
pub mod store;
pub mod wire;

pub use logs::{
    Direction, Eta, MessageKind, StatusRecord, Timestamp, VerboseRecord, VlogDialect,
};
pub use wire::{CommandEnvelope, CommandKind, ErrorCode, ResponseEnvelope};
