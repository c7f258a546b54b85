use std::fmt::{self, Write as _};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::{at_line, malformed, Direction, LogError, MessageKind, Timestamp, VlogDialect};

/// One logged protocol message, seen from the logging peer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VerboseRecord {
    pub timestamp: Timestamp,
    pub direction: Direction,
    pub kind: MessageKind,
    pub remote_peer: String,
    pub piece_index: Option<u32>,
    pub block_offset: Option<u32>,
    pub block_length: Option<u32>,
    pub bitfield_hex: Option<String>,
}

impl VerboseRecord {
    pub fn new(timestamp: Timestamp, direction: Direction, kind: MessageKind, remote: &str) -> Self {
        VerboseRecord {
            timestamp,
            direction,
            kind,
            remote_peer: remote.to_string(),
            piece_index: None,
            block_offset: None,
            block_length: None,
            bitfield_hex: None,
        }
    }

    pub fn with_block(mut self, index: u32, offset: u32, length: u32) -> Self {
        self.piece_index = Some(index);
        self.block_offset = Some(offset);
        self.block_length = Some(length);
        self
    }

    pub fn with_piece(mut self, index: u32) -> Self {
        self.piece_index = Some(index);
        self
    }

    pub fn with_bitfield(mut self, hex: String) -> Self {
        self.bitfield_hex = Some(hex);
        self
    }

    /// Checks which payload fields the message kind requires.
    pub fn validate(&self) -> Result<(), String> {
        let block = (self.piece_index.is_some(), self.block_offset.is_some(), self.block_length.is_some());
        let ok = match self.kind {
            MessageKind::Request | MessageKind::Piece | MessageKind::Cancel => {
                block == (true, true, true) && self.bitfield_hex.is_none()
            }
            MessageKind::Have => block == (true, false, false) && self.bitfield_hex.is_none(),
            MessageKind::Bitfield => block == (false, false, false) && self.bitfield_hex.is_some(),
            MessageKind::Choke
            | MessageKind::Unchoke
            | MessageKind::Interested
            | MessageKind::NotInterested => {
                block == (false, false, false) && self.bitfield_hex.is_none()
            }
        };
        if !ok {
            return Err(format!("payload fields do not match a `{}` message", self.kind));
        }
        if let Some(hex) = &self.bitfield_hex {
            if hex.len() % 2 != 0 || !hex.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
                return Err("bitfield must be lowercase hex bytes".into());
            }
        }
        if !is_peer_addr(&self.remote_peer) {
            return Err(format!("`{}` is not a host:port address", self.remote_peer));
        }
        Ok(())
    }

    /// Renders the canonical line. `with_peer` selects the unified layout.
    pub fn render(&self, with_peer: bool) -> String {
        let mut out = String::with_capacity(96);
        self.write_to(&mut out, with_peer);
        out
    }

    pub fn render_for(&self, dialect: VlogDialect) -> String {
        self.render(dialect == VlogDialect::UnifiedFile)
    }

    fn write_to(&self, out: &mut String, with_peer: bool) {
        let _ = write!(out, "{} {} {}", self.timestamp, self.direction.token(), self.kind.token());
        if with_peer {
            let _ = write!(out, " peer={}", self.remote_peer);
        }
        if let Some(index) = self.piece_index {
            let _ = write!(out, " index={index}");
        }
        if let (Some(begin), Some(length)) = (self.block_offset, self.block_length) {
            let _ = write!(out, " begin={begin} length={length}");
        }
        if let Some(hex) = &self.bitfield_hex {
            let _ = write!(out, " bitfield={hex}");
        }
    }
}

impl fmt::Display for VerboseRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(true))
    }
}

fn is_peer_addr(s: &str) -> bool {
    match s.rsplit_once(':') {
        Some((host, port)) => {
            !host.is_empty()
                && !host.contains(char::is_whitespace)
                && port.parse::<u16>().is_ok_and(|p| p > 0)
        }
        None => false,
    }
}

fn field_u32(token: &str, column: usize) -> Result<u32, LogError> {
    if token.is_empty() || !token.bytes().all(|b| b.is_ascii_digit()) || (token.len() > 1 && token.starts_with('0')) {
        return Err(malformed(column, format!("`{token}` is not a decimal number")));
    }
    token.parse().map_err(|_| malformed(column, format!("`{token}` out of range")))
}

/// Parses one verbose line.
///
/// Returns `Ok(None)` for lines that are not a recognised protocol message
/// (clients interleave debug output). `file_peer` is the remote address
/// implied by the file name in the per-peer dialect.
pub fn parse_verbose_line(line: &str, file_peer: Option<&str>) -> Result<Option<VerboseRecord>, LogError> {
    let mut tokens = line.split(' ');
    let (Some(ts), Some(dir), Some(kind)) = (tokens.next(), tokens.next(), tokens.next()) else {
        return Ok(None);
    };
    let Some(kind) = MessageKind::from_token(kind) else {
        return Ok(None);
    };
    let timestamp: Timestamp = ts.parse().map_err(|_| malformed(1, format!("bad timestamp `{ts}`")))?;
    let direction = Direction::from_token(dir)
        .ok_or_else(|| malformed(ts.len() + 2, format!("bad direction `{dir}`")))?;

    let mut record = VerboseRecord::new(timestamp, direction, kind, "");
    let mut peer: Option<&str> = None;
    let mut column = ts.len() + dir.len() + kind.token().len() + 4;
    for token in tokens {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| malformed(column, format!("expected key=value, found `{token}`")))?;
        let seen = match key {
            "peer" => peer.replace(value).is_some(),
            "index" => record.piece_index.replace(field_u32(value, column)?).is_some(),
            "begin" => record.block_offset.replace(field_u32(value, column)?).is_some(),
            "length" => record.block_length.replace(field_u32(value, column)?).is_some(),
            "bitfield" => record.bitfield_hex.replace(value.to_string()).is_some(),
            _ => return Err(malformed(column, format!("unknown field `{key}`"))),
        };
        if seen {
            return Err(malformed(column, format!("repeated field `{key}`")));
        }
        column += token.len() + 1;
    }
    record.remote_peer = match (peer, file_peer) {
        (Some(p), _) | (None, Some(p)) => p.to_string(),
        (None, None) => return Err(malformed(column, "no peer column and no per-peer file name")),
    };
    record.validate().map_err(|reason| malformed(1, reason))?;
    Ok(Some(record))
}

/// Single-pass streaming parser over one verbose log.
pub struct VerboseReader<R> {
    inner: R,
    buf: String,
    line: usize,
    file_peer: Option<String>,
    skipped: u64,
}

impl<R: BufRead> VerboseReader<R> {
    pub fn new(inner: R, file_peer: Option<String>) -> Self {
        VerboseReader { inner, buf: String::new(), line: 0, file_peer, skipped: 0 }
    }

    /// Lines that did not hold a recognised message kind.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }
}

impl<R: BufRead> Iterator for VerboseReader<R> {
    type Item = Result<VerboseRecord, LogError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line += 1;
            let line = self.buf.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                continue;
            }
            match parse_verbose_line(line, self.file_peer.as_deref()) {
                Ok(Some(record)) => return Some(Ok(record)),
                Ok(None) => {
                    self.skipped += 1;
                    log::debug!("skipping unrecognised verbose line {}", self.line);
                }
                Err(e) => return Some(Err(at_line(e, self.line))),
            }
        }
    }
}

/// Parses a whole stream, returning the records and the count of skipped lines.
pub fn parse_verbose_stream<R: BufRead>(
    input: R,
    dialect: VlogDialect,
    file_peer: Option<&str>,
) -> Result<(Vec<VerboseRecord>, u64), LogError> {
    if dialect == VlogDialect::PerPeerFiles && file_peer.is_none() {
        return Err(LogError::AmbiguousDialect("per-peer stream without a peer address".into()));
    }
    let mut reader = VerboseReader::new(input, file_peer.map(str::to_string));
    let mut out = Vec::new();
    for record in reader.by_ref() {
        out.push(record?);
    }
    Ok((out, reader.skipped()))
}
