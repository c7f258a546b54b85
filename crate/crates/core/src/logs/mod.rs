//! Status and verbose log grammars.
//!
//! Both the simulator (when emitting) and the parsers (when ingesting) go
//! through the types in this module, so a rendered record always parses back
//! to the same value.
//!
//! Status line:
//!
//! ```text
//! 2010-03-01T10:00:12Z ds=524288 us=262144 d=6291456 u=1048576 eta=58 peers=49 pct=12.50 size=50331648 name=test.bin
//! ```
//!
//! Verbose line (the `peer=` column is omitted in per-peer files):
//!
//! ```text
//! 2010-03-01T10:00:03Z RCV piece peer=10.0.1.7:6881 index=4 begin=16384 length=16384
//! ```

mod dialect;
mod status;
mod verbose;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dialect::{detect_dialect, peer_from_file_name, per_peer_file_name, VlogDialect};
pub use status::{parse_status_line, read_last_status, Eta, Percent, StatusReader, StatusRecord};
pub use verbose::{parse_verbose_line, parse_verbose_stream, VerboseReader, VerboseRecord};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("malformed line {line}, column {column}: {reason}")]
    MalformedLine { line: usize, column: usize, reason: String },
    #[error("cannot tell the verbose log dialect: {0}")]
    AmbiguousDialect(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for LogError {
    fn from(err: std::io::Error) -> Self {
        LogError::Io(err.to_string())
    }
}

pub(crate) fn malformed(column: usize, reason: impl Into<String>) -> LogError {
    LogError::MalformedLine { line: 0, column, reason: reason.into() }
}

pub(crate) fn at_line(err: LogError, line: usize) -> LogError {
    match err {
        LogError::MalformedLine { column, reason, .. } => {
            LogError::MalformedLine { line, column, reason }
        }
        other => other,
    }
}

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

/// UTC wall-clock time with one second resolution, stored as seconds since
/// the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn seconds(self) -> i64 {
        self.0
    }

    pub fn offset(self, secs: i64) -> Timestamp {
        Timestamp(self.0 + secs)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match DateTime::<Utc>::from_timestamp(self.0, 0) {
            Some(dt) => write!(f, "{}", dt.format(TIMESTAMP_FORMAT)),
            None => write!(f, "invalid-time({})", self.0),
        }
    }
}

impl FromStr for Timestamp {
    type Err = chrono::ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let naive = NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)?;
        Ok(Timestamp(naive.and_utc().timestamp()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    Sent,
    Received,
}

impl Direction {
    pub fn token(self) -> &'static str {
        match self {
            Direction::Sent => "SND",
            Direction::Received => "RCV",
        }
    }

    pub fn from_token(token: &str) -> Option<Direction> {
        match token {
            "SND" => Some(Direction::Sent),
            "RCV" => Some(Direction::Received),
            _ => None,
        }
    }

    pub fn code(self) -> i64 {
        match self {
            Direction::Sent => 0,
            Direction::Received => 1,
        }
    }

    pub fn from_code(code: i64) -> Option<Direction> {
        match code {
            0 => Some(Direction::Sent),
            1 => Some(Direction::Received),
            _ => None,
        }
    }
}

/// The nine peer wire messages the instrumented clients report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Choke,
    Unchoke,
    Interested,
    NotInterested,
    Have,
    Bitfield,
    Request,
    Piece,
    Cancel,
}

impl MessageKind {
    pub const ALL: [MessageKind; 9] = [
        MessageKind::Choke,
        MessageKind::Unchoke,
        MessageKind::Interested,
        MessageKind::NotInterested,
        MessageKind::Have,
        MessageKind::Bitfield,
        MessageKind::Request,
        MessageKind::Piece,
        MessageKind::Cancel,
    ];

    pub fn token(self) -> &'static str {
        match self {
            MessageKind::Choke => "choke",
            MessageKind::Unchoke => "unchoke",
            MessageKind::Interested => "interested",
            MessageKind::NotInterested => "not_interested",
            MessageKind::Have => "have",
            MessageKind::Bitfield => "bitfield",
            MessageKind::Request => "request",
            MessageKind::Piece => "piece",
            MessageKind::Cancel => "cancel",
        }
    }

    pub fn from_token(token: &str) -> Option<MessageKind> {
        MessageKind::ALL.into_iter().find(|k| k.token() == token)
    }

    /// Numeric id, matching the message ids of the peer wire protocol.
    pub fn code(self) -> i64 {
        match self {
            MessageKind::Choke => 0,
            MessageKind::Unchoke => 1,
            MessageKind::Interested => 2,
            MessageKind::NotInterested => 3,
            MessageKind::Have => 4,
            MessageKind::Bitfield => 5,
            MessageKind::Request => 6,
            MessageKind::Piece => 7,
            MessageKind::Cancel => 8,
        }
    }

    pub fn from_code(code: i64) -> Option<MessageKind> {
        MessageKind::ALL.into_iter().find(|k| k.code() == code)
    }

    /// `request`, `piece` and `cancel` carry (index, begin, length).
    pub fn has_block(self) -> bool {
        matches!(self, MessageKind::Request | MessageKind::Piece | MessageKind::Cancel)
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for MessageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageKind::from_token(s).ok_or_else(|| format!("unknown message kind `{s}`"))
    }
}
