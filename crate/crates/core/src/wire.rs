//! Commander/agent message set and its framing.
//!
//! A frame is a 4-byte big-endian payload length followed by the UTF-8
//! payload. The payload's first line names the command (`START-CLIENT`) or
//! the outcome (`OK`, `ERR <CODE>`); each further line is one `key=value`
//! pair. Lines are joined by `\n` with no trailing newline. Values may hold
//! any text: `\` and line breaks are escaped as `\\`, `\n` and `\r`.

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

/// Largest payload a frame may carry.
pub const MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame is shorter than its header or declared length")]
    FrameTooShort,
    #[error("frame length {0} exceeds the limit or the declared length")]
    FrameTooLong(usize),
    #[error("payload is not valid UTF-8")]
    BadUtf8,
    #[error("unknown command `{0}`")]
    UnknownCommand(String),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("missing required key `{0}`")]
    MissingRequiredKey(String),
    #[error("invalid envelope: {0}")]
    InvalidEnvelope(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for WireError {
    fn from(err: io::Error) -> Self {
        WireError::Io(err.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CommandKind {
    StartClient,
    StopClient,
    GetClients,
    GetOutput,
    Archive,
    GetStatus,
    Cleanup,
}

impl CommandKind {
    pub const ALL: [CommandKind; 7] = [
        CommandKind::StartClient,
        CommandKind::StopClient,
        CommandKind::GetClients,
        CommandKind::GetOutput,
        CommandKind::Archive,
        CommandKind::GetStatus,
        CommandKind::Cleanup,
    ];

    pub fn wire_name(self) -> &'static str {
        match self {
            CommandKind::StartClient => "START-CLIENT",
            CommandKind::StopClient => "STOP-CLIENT",
            CommandKind::GetClients => "GET-CLIENTS",
            CommandKind::GetOutput => "GET-OUTPUT",
            CommandKind::Archive => "ARCHIVE",
            CommandKind::GetStatus => "GET-STATUS",
            CommandKind::Cleanup => "CLEANUP",
        }
    }

    pub fn from_wire(name: &str) -> Option<CommandKind> {
        CommandKind::ALL.into_iter().find(|k| k.wire_name() == name)
    }

    pub fn required_keys(self) -> &'static [&'static str] {
        match self {
            CommandKind::StartClient => &["TORRENT", "DOWN_DIR", "SLOG", "VLOG", "CLIENT"],
            CommandKind::StopClient | CommandKind::GetStatus | CommandKind::GetOutput => &["ID"],
            _ => &[],
        }
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

/// The file classes CLEANUP can erase.
pub const CLEANUP_FLAGS: [&str; 5] = ["ALL", "DOWN", "VLOGS", "SLOGS", "ARCHIVE"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandEnvelope {
    pub kind: CommandKind,
    pub args: Vec<(String, String)>,
}

impl CommandEnvelope {
    pub fn new(kind: CommandKind) -> Self {
        CommandEnvelope { kind, args: Vec::new() }
    }

    pub fn arg(mut self, key: &str, value: impl Into<String>) -> Self {
        self.args.push((key.to_string(), value.into()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.args.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn validate(&self) -> Result<(), WireError> {
        check_keys(&self.args, is_command_key)?;
        for key in self.kind.required_keys() {
            if self.get(key).is_none() {
                return Err(WireError::MissingRequiredKey((*key).to_string()));
            }
        }
        if self.kind == CommandKind::Cleanup {
            let mut any = false;
            for flag in CLEANUP_FLAGS {
                match self.get(flag) {
                    None => {}
                    Some("0" | "1") => any = true,
                    Some(v) => {
                        return Err(WireError::InvalidEnvelope(format!("{flag} must be 0 or 1, got `{v}`")))
                    }
                }
            }
            if !any {
                return Err(WireError::MissingRequiredKey(CLEANUP_FLAGS.join("|")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    UnknownCmd,
    BadArgs,
    NoSuchId,
    ClientFailed,
    IoError,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 5] =
        [ErrorCode::UnknownCmd, ErrorCode::BadArgs, ErrorCode::NoSuchId, ErrorCode::ClientFailed, ErrorCode::IoError];

    pub fn token(self) -> &'static str {
        match self {
            ErrorCode::UnknownCmd => "UNKNOWN_CMD",
            ErrorCode::BadArgs => "BAD_ARGS",
            ErrorCode::NoSuchId => "NO_SUCH_ID",
            ErrorCode::ClientFailed => "CLIENT_FAILED",
            ErrorCode::IoError => "IO_ERROR",
        }
    }

    pub fn from_token(s: &str) -> Option<ErrorCode> {
        ErrorCode::ALL.into_iter().find(|c| c.token() == s)
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Err,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseEnvelope {
    pub status: Status,
    pub error_code: Option<ErrorCode>,
    pub body: Vec<(String, String)>,
}

impl ResponseEnvelope {
    pub fn ok() -> Self {
        ResponseEnvelope { status: Status::Ok, error_code: None, body: Vec::new() }
    }

    pub fn err(code: ErrorCode) -> Self {
        ResponseEnvelope { status: Status::Err, error_code: Some(code), body: Vec::new() }
    }

    /// An error carrying a human-readable `reason`.
    pub fn err_with(code: ErrorCode, reason: impl Into<String>) -> Self {
        ResponseEnvelope::err(code).with("reason", reason)
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.body.push((key.to_string(), value.into()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.body.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    pub fn validate(&self) -> Result<(), WireError> {
        match (self.status, self.error_code) {
            (Status::Ok, None) | (Status::Err, Some(_)) => {}
            _ => return Err(WireError::InvalidEnvelope("error code must be present exactly on ERR".into())),
        }
        check_keys(&self.body, is_body_key)
    }
}

impl fmt::Display for ResponseEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.error_code {
            None => f.write_str("OK")?,
            Some(code) => write!(f, "ERR {code}")?,
        }
        for (k, v) in &self.body {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

fn is_command_key(k: &str) -> bool {
    !k.is_empty() && k.bytes().all(|b| b.is_ascii_uppercase() || b == b'_')
}

fn is_body_key(k: &str) -> bool {
    !k.is_empty() && k.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

fn check_keys(pairs: &[(String, String)], valid: fn(&str) -> bool) -> Result<(), WireError> {
    for (i, (key, _)) in pairs.iter().enumerate() {
        if !valid(key) {
            return Err(WireError::InvalidEnvelope(format!("bad key `{key}`")));
        }
        if pairs[..i].iter().any(|(k, _)| k == key) {
            return Err(WireError::DuplicateKey(key.clone()));
        }
    }
    Ok(())
}

fn escape(value: &str, out: &mut String) {
    for c in value.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
}

fn unescape(value: &str) -> Result<String, WireError> {
    let mut out = String::with_capacity(value.len());
    let mut chars = value.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(WireError::InvalidEnvelope(format!("bad escape `\\{}`", other.unwrap_or(' ')))),
        }
    }
    Ok(out)
}

fn render(head: &str, pairs: &[(String, String)]) -> Result<Vec<u8>, WireError> {
    let mut payload = String::from(head);
    for (k, v) in pairs {
        payload.push('\n');
        payload.push_str(k);
        payload.push('=');
        escape(v, &mut payload);
    }
    frame(payload.into_bytes())
}

fn frame(payload: Vec<u8>) -> Result<Vec<u8>, WireError> {
    if payload.len() > MAX_FRAME {
        return Err(WireError::FrameTooLong(payload.len()));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits the first frame off `bytes`, returning its payload and the rest.
pub fn split_frame(bytes: &[u8]) -> Result<(&[u8], &[u8]), WireError> {
    let header: [u8; 4] = bytes.get(..4).ok_or(WireError::FrameTooShort)?.try_into().expect("4 bytes");
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(WireError::FrameTooLong(len));
    }
    let payload = bytes.get(4..4 + len).ok_or(WireError::FrameTooShort)?;
    Ok((payload, &bytes[4 + len..]))
}

fn exact_payload(bytes: &[u8]) -> Result<&str, WireError> {
    let (payload, rest) = split_frame(bytes)?;
    if !rest.is_empty() {
        return Err(WireError::FrameTooLong(bytes.len() - 4));
    }
    std::str::from_utf8(payload).map_err(|_| WireError::BadUtf8)
}

fn parse_pairs<'a>(lines: impl Iterator<Item = &'a str>) -> Result<Vec<(String, String)>, WireError> {
    lines
        .map(|line| {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| WireError::InvalidEnvelope(format!("line `{line}` is not key=value")))?;
            Ok((k.to_string(), unescape(v)?))
        })
        .collect()
}

pub fn encode_command(cmd: &CommandEnvelope) -> Result<Vec<u8>, WireError> {
    cmd.validate()?;
    render(cmd.kind.wire_name(), &cmd.args)
}

/// Decodes one complete frame.
pub fn decode_command(bytes: &[u8]) -> Result<CommandEnvelope, WireError> {
    decode_command_payload(exact_payload(bytes)?)
}

pub fn decode_command_payload(payload: &str) -> Result<CommandEnvelope, WireError> {
    let mut lines = payload.split('\n');
    let head = lines.next().unwrap_or_default();
    let kind = CommandKind::from_wire(head).ok_or_else(|| WireError::UnknownCommand(head.to_string()))?;
    let cmd = CommandEnvelope { kind, args: parse_pairs(lines)? };
    cmd.validate()?;
    Ok(cmd)
}

pub fn encode_response(resp: &ResponseEnvelope) -> Result<Vec<u8>, WireError> {
    resp.validate()?;
    let head = match resp.error_code {
        None => "OK".to_string(),
        Some(code) => format!("ERR {code}"),
    };
    render(&head, &resp.body)
}

pub fn decode_response(bytes: &[u8]) -> Result<ResponseEnvelope, WireError> {
    let payload = exact_payload(bytes)?;
    let mut lines = payload.split('\n');
    let head = lines.next().unwrap_or_default();
    let mut resp = if head == "OK" {
        ResponseEnvelope::ok()
    } else if let Some(code) = head.strip_prefix("ERR ").and_then(ErrorCode::from_token) {
        ResponseEnvelope::err(code)
    } else {
        return Err(WireError::InvalidEnvelope(format!("bad response line `{head}`")));
    };
    resp.body = parse_pairs(lines)?;
    resp.validate()?;
    Ok(resp)
}

/// Reads one frame (header included). `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(WireError::FrameTooShort),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(WireError::FrameTooLong(len));
    }
    let mut frame = vec![0u8; 4 + len];
    frame[..4].copy_from_slice(&header);
    reader.read_exact(&mut frame[4..]).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::FrameTooShort,
        _ => e.into(),
    })?;
    Ok(Some(frame))
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &[u8]) -> Result<(), WireError> {
    writer.write_all(frame)?;
    writer.flush()?;
    Ok(())
}

/// The six fields of a GET-STATUS reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusReport {
    pub down_speed: u64,
    pub up_speed: u64,
    pub downloaded: u64,
    pub uploaded: u64,
    pub eta: crate::logs::Eta,
    pub num_peers: u32,
}

impl StatusReport {
    pub const KEYS: [&'static str; 6] = ["down_speed", "up_speed", "downloaded", "uploaded", "eta", "num_peers"];

    pub fn from_record(rec: &crate::logs::StatusRecord) -> Self {
        StatusReport {
            down_speed: rec.down_speed,
            up_speed: rec.up_speed,
            downloaded: rec.downloaded,
            uploaded: rec.uploaded,
            eta: rec.eta,
            num_peers: rec.num_peers,
        }
    }

    pub fn to_response(&self) -> ResponseEnvelope {
        ResponseEnvelope::ok()
            .with("down_speed", self.down_speed.to_string())
            .with("up_speed", self.up_speed.to_string())
            .with("downloaded", self.downloaded.to_string())
            .with("uploaded", self.uploaded.to_string())
            .with("eta", self.eta.to_string())
            .with("num_peers", self.num_peers.to_string())
    }

    pub fn from_response(resp: &ResponseEnvelope) -> Result<Self, WireError> {
        let keys: Vec<&str> = resp.body.iter().map(|(k, _)| k.as_str()).collect();
        if resp.status != Status::Ok || keys != Self::KEYS {
            return Err(WireError::InvalidEnvelope(format!("not a status reply: {resp}")));
        }
        let num = |k: &str| -> Result<u64, WireError> {
            resp.get(k)
                .unwrap_or_default()
                .parse()
                .map_err(|_| WireError::InvalidEnvelope(format!("`{k}` is not a number")))
        };
        Ok(StatusReport {
            down_speed: num("down_speed")?,
            up_speed: num("up_speed")?,
            downloaded: num("downloaded")?,
            uploaded: num("uploaded")?,
            eta: resp
                .get("eta")
                .unwrap_or_default()
                .parse()
                .map_err(|e: String| WireError::InvalidEnvelope(e))?,
            num_peers: u32::try_from(num("num_peers")?)
                .map_err(|_| WireError::InvalidEnvelope("num_peers out of range".into()))?,
        })
    }
}
