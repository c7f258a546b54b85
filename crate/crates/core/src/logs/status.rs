use std::fmt;
use std::fs::File;
use std::io::{BufRead, Read, Seek, SeekFrom};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{at_line, malformed, LogError, Timestamp};

/// Estimated time of arrival. Seeders and stalled leechers report `inf`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Eta {
    Seconds(u64),
    Infinite,
}

impl fmt::Display for Eta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Eta::Seconds(s) => write!(f, "{s}"),
            Eta::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Eta {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "inf" {
            return Ok(Eta::Infinite);
        }
        parse_decimal(s).map(Eta::Seconds)
    }
}

/// Completion percentage in hundredths (`1250` is `12.50`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Percent(pub u16);

impl Percent {
    pub const COMPLETE: Percent = Percent(10_000);

    /// Floor of `done / total` in hundredths of a percent.
    pub fn from_fraction(done: u64, total: u64) -> Percent {
        if total == 0 {
            return Percent::COMPLETE;
        }
        let hundredths = (u128::from(done.min(total)) * 10_000) / u128::from(total);
        Percent(hundredths as u16)
    }

    pub fn is_complete(self) -> bool {
        self == Percent::COMPLETE
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl FromStr for Percent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (whole, frac) = s.split_once('.').ok_or("percent needs two decimals")?;
        if frac.len() != 2 || whole.is_empty() || whole.len() > 3 {
            return Err("percent must look like NN.NN".into());
        }
        if !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("`{frac}` is not a decimal fraction"));
        }
        let value = parse_decimal(whole)? * 100 + frac.parse::<u64>().map_err(|e| e.to_string())?;
        if value > 10_000 {
            return Err("percent above 100".into());
        }
        Ok(Percent(value as u16))
    }
}

/// One periodic session snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusRecord {
    pub timestamp: Timestamp,
    pub down_speed: u64,
    pub up_speed: u64,
    pub downloaded: u64,
    pub uploaded: u64,
    pub eta: Eta,
    pub num_peers: u32,
    pub percent: Percent,
    pub transfer_size: u64,
    pub file_name: String,
}

impl StatusRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.downloaded > self.transfer_size {
            return Err("downloaded exceeds transfer size".into());
        }
        if self.percent.is_complete() && !matches!(self.eta, Eta::Seconds(0) | Eta::Infinite) {
            return Err("complete transfer with a pending eta".into());
        }
        if self.file_name.is_empty() || self.file_name.contains(['\n', '\r']) {
            return Err("file name must be a non-empty single line".into());
        }
        Ok(())
    }
}

impl fmt::Display for StatusRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ds={} us={} d={} u={} eta={} peers={} pct={} size={} name={}",
            self.timestamp,
            self.down_speed,
            self.up_speed,
            self.downloaded,
            self.uploaded,
            self.eta,
            self.num_peers,
            self.percent,
            self.transfer_size,
            self.file_name
        )
    }
}

fn parse_decimal(s: &str) -> Result<u64, String> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("`{s}` is not a decimal number"));
    }
    if s.len() > 1 && s.starts_with('0') {
        return Err(format!("`{s}` has a leading zero"));
    }
    s.parse::<u64>().map_err(|e| e.to_string())
}

const STATUS_KEYS: [&str; 8] = ["ds", "us", "d", "u", "eta", "peers", "pct", "size"];

/// Parses one canonical status line.
pub fn parse_status_line(line: &str) -> Result<StatusRecord, LogError> {
    let mut column = 1;
    let mut rest = line;

    let (ts_token, tail) = rest.split_once(' ').ok_or_else(|| malformed(column, "missing fields"))?;
    let timestamp: Timestamp =
        ts_token.parse().map_err(|_| malformed(column, format!("bad timestamp `{ts_token}`")))?;
    column += ts_token.len() + 1;
    rest = tail;

    let mut values = [""; 8];
    for (slot, key) in values.iter_mut().zip(STATUS_KEYS) {
        let (token, tail) = match rest.split_once(' ') {
            Some(split) => split,
            None => return Err(malformed(column, format!("missing `{key}=`"))),
        };
        let value = token
            .strip_prefix(key)
            .and_then(|t| t.strip_prefix('='))
            .ok_or_else(|| malformed(column, format!("expected `{key}=`, found `{token}`")))?;
        *slot = value;
        column += token.len() + 1;
        rest = tail;
    }
    let file_name = rest
        .strip_prefix("name=")
        .ok_or_else(|| malformed(column, "missing `name=`"))?
        .to_string();

    let num = |idx: usize| -> Result<u64, LogError> {
        parse_decimal(values[idx]).map_err(|reason| malformed(column_of(line, STATUS_KEYS[idx]), reason))
    };
    let record = StatusRecord {
        timestamp,
        down_speed: num(0)?,
        up_speed: num(1)?,
        downloaded: num(2)?,
        uploaded: num(3)?,
        eta: values[4].parse().map_err(|r: String| malformed(column_of(line, "eta"), r))?,
        num_peers: u32::try_from(num(5)?)
            .map_err(|_| malformed(column_of(line, "peers"), "peer count out of range"))?,
        percent: values[6].parse().map_err(|r: String| malformed(column_of(line, "pct"), r))?,
        transfer_size: num(7)?,
        file_name,
    };
    record.validate().map_err(|reason| malformed(1, reason))?;
    Ok(record)
}

fn column_of(line: &str, key: &str) -> usize {
    line.find(&format!(" {key}=")).map(|i| i + 2).unwrap_or(1)
}

/// Streams status records out of a reader, skipping blank lines.
pub struct StatusReader<R> {
    inner: R,
    buf: String,
    line: usize,
}

impl<R: BufRead> StatusReader<R> {
    pub fn new(inner: R) -> Self {
        StatusReader { inner, buf: String::new(), line: 0 }
    }
}

impl<R: BufRead> Iterator for StatusReader<R> {
    type Item = Result<StatusRecord, LogError>;

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
            return Some(parse_status_line(line).map_err(|e| at_line(e, self.line)));
        }
    }
}

/// Reads the last complete line of a status log. Returns `Ok(None)` when the
/// file holds no complete line yet.
pub fn read_last_status(path: &Path) -> Result<Option<StatusRecord>, LogError> {
    const TAIL: u64 = 8 * 1024;
    let mut file = File::open(path)?;
    let len = file.metadata()?.len();
    let start = len.saturating_sub(TAIL);
    file.seek(SeekFrom::Start(start))?;
    let mut tail = Vec::with_capacity((len - start) as usize);
    file.read_to_end(&mut tail)?;
    let text = String::from_utf8_lossy(&tail);

    // A trailing fragment without a newline is still being written.
    let complete = match text.rfind('\n') {
        Some(idx) => &text[..idx],
        None => return Ok(None),
    };
    match complete.lines().rev().find(|l| !l.trim().is_empty()) {
        Some(line) => parse_status_line(line.trim_end_matches('\r')).map(Some),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const LINE: &str = "2010-03-01T10:00:12Z ds=524288 us=262144 d=6291456 u=1048576 eta=58 peers=49 pct=12.50 size=50331648 name=test.bin";

    #[test]
    fn parses_canonical_line() {
        let rec = parse_status_line(LINE).unwrap();
        assert_eq!(rec.down_speed, 524_288);
        assert_eq!(rec.up_speed, 262_144);
        assert_eq!(rec.downloaded, 6_291_456);
        assert_eq!(rec.uploaded, 1_048_576);
        assert_eq!(rec.eta, Eta::Seconds(58));
        assert_eq!(rec.num_peers, 49);
        assert_eq!(rec.percent, Percent(1250));
        assert_eq!(rec.transfer_size, 50_331_648);
        assert_eq!(rec.file_name, "test.bin");
        assert_eq!(rec.to_string(), LINE);
    }

    #[test]
    fn infinite_eta() {
        let line = LINE.replace("eta=58", "eta=inf");
        assert_eq!(parse_status_line(&line).unwrap().eta, Eta::Infinite);
    }

    #[test]
    fn file_name_may_contain_spaces() {
        let line = LINE.replace("name=test.bin", "name=my file.bin");
        let rec = parse_status_line(&line).unwrap();
        assert_eq!(rec.file_name, "my file.bin");
        assert_eq!(rec.to_string(), line);
    }

    #[test]
    fn missing_peers_is_malformed() {
        let line = LINE.replace(" peers=49", "");
        match parse_status_line(&line) {
            Err(LogError::MalformedLine { column, reason, .. }) => {
                assert!(reason.contains("peers"), "{reason}");
                assert_eq!(column, line.find("pct=").unwrap() + 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_canonical_numbers_and_invariants() {
        assert!(parse_status_line(&LINE.replace("ds=524288", "ds=0524288")).is_err());
        assert!(parse_status_line(&LINE.replace("pct=12.50", "pct=12.5")).is_err());
        assert!(parse_status_line(&LINE.replace("pct=12.50", "pct=12.+5")).is_err());
        assert_eq!(parse_status_line(&LINE.replace("pct=12.50", "pct=0.05")).unwrap().percent, Percent(5));
        assert!(parse_status_line(&LINE.replace("pct=12.50", "pct=100.01")).is_err());
        assert!(parse_status_line(&LINE.replace("d=6291456", "d=99999999999")).is_err());
        assert!(parse_status_line(&LINE.replace("pct=12.50", "pct=100.00")).is_err());
    }

    #[test]
    fn percent_floor() {
        assert_eq!(Percent::from_fraction(1, 3).to_string(), "33.33");
        assert_eq!(Percent::from_fraction(3, 3), Percent::COMPLETE);
        assert_eq!(Percent::from_fraction(0, 3).to_string(), "0.00");
    }

    #[test]
    fn last_line_ignores_partial_write() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        assert_eq!(read_last_status(f.path()).unwrap(), None);
        writeln!(f, "{LINE}").unwrap();
        let second = LINE.replace("ds=524288", "ds=1");
        writeln!(f, "{second}").unwrap();
        write!(f, "2010-03-01T10:00:14Z ds=").unwrap();
        f.flush().unwrap();
        assert_eq!(read_last_status(f.path()).unwrap().unwrap().down_speed, 1);
    }

    #[test]
    fn reader_reports_line_numbers() {
        let text = format!("{LINE}\n\n{}\n", LINE.replace("eta=58", "eta=x"));
        let results: Vec<_> = StatusReader::new(text.as_bytes()).collect();
        assert!(results[0].is_ok());
        assert!(matches!(results[1], Err(LogError::MalformedLine { line: 3, .. })));
    }
}
