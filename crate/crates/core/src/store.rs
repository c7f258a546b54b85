//! Single-file SQLite store for experiments, peers and their logs.
//!
//! Message rows live in `WITHOUT ROWID` tables keyed by
//! `(peer_id, ts, seq)`: the key doubles as the window-query index and the
//! per-peer `seq` counter keeps repeated identical events apart. Remote
//! addresses are interned in `remotes`.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rusqlite::{params, Connection, OpenFlags, OptionalExtension, Transaction};
use thiserror::Error;

use crate::logs::{
    detect_dialect, peer_from_file_name, Direction, Eta, MessageKind, Percent, StatusReader, StatusRecord, Timestamp,
    VerboseReader, VerboseRecord, VlogDialect,
};

/// Rows per transaction when streaming a log into the store.
pub const INGEST_BATCH: usize = 10_000;

const APPLICATION_ID: i64 = 0x5357_4652; // "SWFR"
const SCHEMA_VERSION: i64 = 1;

const SCHEMA: &str = "
CREATE TABLE experiments (
    id          INTEGER PRIMARY KEY,
    swarm_id    TEXT NOT NULL,
    num_peers   INTEGER NOT NULL,
    num_seeders INTEGER NOT NULL,
    start_time  INTEGER NOT NULL,
    file_name   TEXT NOT NULL,
    file_size   INTEGER NOT NULL
);
CREATE TABLE peers (
    id            INTEGER PRIMARY KEY,
    experiment_id INTEGER NOT NULL REFERENCES experiments(id) ON DELETE CASCADE,
    name          TEXT NOT NULL,
    client_name   TEXT NOT NULL,
    addr          TEXT NOT NULL,
    down_limit    INTEGER,
    up_limit      INTEGER,
    cpu           TEXT NOT NULL,
    ram_bytes     INTEGER,
    os_version    TEXT NOT NULL,
    net_info      TEXT NOT NULL,
    next_seq      INTEGER NOT NULL DEFAULT 0,
    UNIQUE (experiment_id, name)
);
CREATE TABLE remotes (
    id   INTEGER PRIMARY KEY,
    addr TEXT NOT NULL UNIQUE
);
CREATE TABLE status (
    peer_id    INTEGER NOT NULL REFERENCES peers(id) ON DELETE CASCADE,
    ts         INTEGER NOT NULL,
    seq        INTEGER NOT NULL,
    down_speed INTEGER NOT NULL,
    up_speed   INTEGER NOT NULL,
    downloaded INTEGER NOT NULL,
    uploaded   INTEGER NOT NULL,
    eta        INTEGER,
    num_peers  INTEGER NOT NULL,
    percent    INTEGER NOT NULL,
    size       INTEGER NOT NULL,
    file_name  TEXT NOT NULL,
    PRIMARY KEY (peer_id, ts, seq)
) WITHOUT ROWID;
CREATE TABLE verbose (
    peer_id  INTEGER NOT NULL REFERENCES peers(id) ON DELETE CASCADE,
    ts       INTEGER NOT NULL,
    seq      INTEGER NOT NULL,
    dir      INTEGER NOT NULL,
    kind     INTEGER NOT NULL,
    remote   INTEGER NOT NULL REFERENCES remotes(id),
    piece    INTEGER,
    begin    INTEGER,
    length   INTEGER,
    bitfield BLOB,
    PRIMARY KEY (peer_id, ts, seq)
) WITHOUT ROWID;
";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not a swarmforge store: {0}")]
    CorruptStore(String),
    #[error("unknown peer {0}")]
    UnknownPeer(i64),
    #[error("unknown experiment {0}")]
    UnknownExperiment(i64),
    #[error("empty or inverted window [{0}, {1})")]
    BadWindow(i64, i64),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error("database error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentMeta {
    pub swarm_id: String,
    pub num_peers: u32,
    pub num_seeders: u32,
    pub start_time: Timestamp,
    pub file_name: String,
    pub file_size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PeerMeta {
    pub experiment_id: i64,
    /// Peer identifier within the experiment.
    pub name: String,
    pub client_name: String,
    pub addr: String,
    pub down_limit: Option<u64>,
    pub up_limit: Option<u64>,
    pub cpu_description: String,
    pub ram_bytes: Option<u64>,
    pub os_version: String,
    pub net_info: String,
}

/// Half-open time window `[start, end)` in epoch seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl Window {
    pub fn new(start: Timestamp, end: Timestamp) -> Self {
        Window { start, end }
    }

    /// Everything representable.
    pub fn all() -> Self {
        Window { start: Timestamp(i64::MIN), end: Timestamp(i64::MAX) }
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.end <= self.start {
            return Err(StoreError::BadWindow(self.start.0, self.end.0));
        }
        Ok(())
    }
}

pub struct Store {
    conn: Connection,
    path: PathBuf,
    remotes: HashMap<String, i64>,
}

fn corrupt(err: rusqlite::Error) -> StoreError {
    match err.sqlite_error_code() {
        Some(rusqlite::ErrorCode::NotADatabase) | Some(rusqlite::ErrorCode::DatabaseCorrupt) => {
            StoreError::CorruptStore(err.to_string())
        }
        _ => StoreError::Sqlite(err),
    }
}

fn to_i64(v: u64) -> Result<i64, StoreError> {
    i64::try_from(v).map_err(|_| StoreError::BadInput(format!("{v} does not fit a 64-bit signed column")))
}

fn hex_to_bytes(hex: &str) -> Vec<u8> {
    (0..hex.len() / 2).map(|i| u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).unwrap_or(0)).collect()
}

fn bytes_to_hex(bytes: &[u8]) -> String {
    crate::sim::to_hex(bytes)
}

impl Store {
    /// Opens or creates a store file.
    pub fn open(path: &Path) -> Result<Store, StoreError> {
        let conn = Connection::open(path)?;
        let mut store = Store { conn, path: path.to_path_buf(), remotes: HashMap::new() };
        store.init(true)?;
        Ok(store)
    }

    pub fn open_read_only(path: &Path) -> Result<Store, StoreError> {
        let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX)?;
        let mut store = Store { conn, path: path.to_path_buf(), remotes: HashMap::new() };
        store.init(false)?;
        Ok(store)
    }

    fn init(&mut self, writable: bool) -> Result<(), StoreError> {
        let app: i64 = self.conn.query_row("PRAGMA application_id", [], |r| r.get(0)).map_err(corrupt)?;
        let tables: i64 = self
            .conn
            .query_row("SELECT count(*) FROM sqlite_master", [], |r| r.get(0))
            .map_err(corrupt)?;
        if app == 0 && tables == 0 {
            if !writable {
                return Err(StoreError::CorruptStore(format!("{} is empty", self.path.display())));
            }
            self.conn.pragma_update(None, "journal_mode", "DELETE")?;
            let tx = self.conn.transaction()?;
            tx.execute_batch(SCHEMA)?;
            tx.pragma_update(None, "application_id", APPLICATION_ID)?;
            tx.pragma_update(None, "user_version", SCHEMA_VERSION)?;
            tx.commit()?;
        } else if app != APPLICATION_ID {
            return Err(StoreError::CorruptStore(format!("{} belongs to another application", self.path.display())));
        } else {
            let version: i64 = self.conn.query_row("PRAGMA user_version", [], |r| r.get(0))?;
            if version != SCHEMA_VERSION {
                return Err(StoreError::CorruptStore(format!("unsupported schema version {version}")));
            }
        }
        self.conn.pragma_update(None, "foreign_keys", "ON")?;
        if writable {
            self.conn.pragma_update(None, "synchronous", "NORMAL")?;
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Size of the store file on disk.
    pub fn file_bytes(&self) -> Result<u64, StoreError> {
        Ok(std::fs::metadata(&self.path)?.len())
    }

    pub fn add_experiment(&mut self, meta: &ExperimentMeta) -> Result<i64, StoreError> {
        self.conn.execute(
            "INSERT INTO experiments (swarm_id, num_peers, num_seeders, start_time, file_name, file_size)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                meta.swarm_id,
                meta.num_peers,
                meta.num_seeders,
                meta.start_time.0,
                meta.file_name,
                to_i64(meta.file_size)?
            ],
        )?;
        Ok(self.conn.last_insert_rowid())
    }

    pub fn experiment(&self, id: i64) -> Result<ExperimentMeta, StoreError> {
        self.conn
            .query_row(
                "SELECT swarm_id, num_peers, num_seeders, start_time, file_name, file_size FROM experiments WHERE id = ?1",
                [id],
                |r| {
                    Ok(ExperimentMeta {
                        swarm_id: r.get(0)?,
                        num_peers: r.get(1)?,
                        num_seeders: r.get(2)?,
                        start_time: Timestamp(r.get(3)?),
                        file_name: r.get(4)?,
                        file_size: r.get::<_, i64>(5)? as u64,
                    })
                },
            )
            .optional()?
            .ok_or(StoreError::UnknownExperiment(id))
    }

    pub fn experiments(&self) -> Result<Vec<i64>, StoreError> {
        let mut stmt = self.conn.prepare("SELECT id FROM experiments ORDER BY id")?;
        let ids = stmt.query_map([], |r| r.get(0))?.collect::<Result<_, _>>()?;
        Ok(ids)
    }

    pub fn add_peer(&mut self, meta: &PeerMeta) -> Result<i64, StoreError> {
        self.experiment(meta.experiment_id)?;
        let res = self.conn.execute(
            "INSERT INTO peers (experiment_id, name, client_name, addr, down_limit, up_limit, cpu, ram_bytes, os_version, net_info)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10)",
            params![
                meta.experiment_id,
                meta.name,
                meta.client_name,
                meta.addr,
                meta.down_limit.map(to_i64).transpose()?,
                meta.up_limit.map(to_i64).transpose()?,
                meta.cpu_description,
                meta.ram_bytes.map(to_i64).transpose()?,
                meta.os_version,
                meta.net_info
            ],
        );
        match res {
            Ok(_) => Ok(self.conn.last_insert_rowid()),
            Err(e) if e.sqlite_error_code() == Some(rusqlite::ErrorCode::ConstraintViolation) => {
                Err(StoreError::ConstraintViolation(e.to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn peer(&self, peer_id: i64) -> Result<PeerMeta, StoreError> {
        self.conn
            .query_row(
                "SELECT experiment_id, name, client_name, addr, down_limit, up_limit, cpu, ram_bytes, os_version, net_info
                 FROM peers WHERE id = ?1",
                [peer_id],
                |r| {
                    Ok(PeerMeta {
                        experiment_id: r.get(0)?,
                        name: r.get(1)?,
                        client_name: r.get(2)?,
                        addr: r.get(3)?,
                        down_limit: r.get::<_, Option<i64>>(4)?.map(|v| v as u64),
                        up_limit: r.get::<_, Option<i64>>(5)?.map(|v| v as u64),
                        cpu_description: r.get(6)?,
                        ram_bytes: r.get::<_, Option<i64>>(7)?.map(|v| v as u64),
                        os_version: r.get(8)?,
                        net_info: r.get(9)?,
                    })
                },
            )
            .optional()?
            .ok_or(StoreError::UnknownPeer(peer_id))
    }

    /// Peer ids of an experiment, in insertion order.
    pub fn peers(&self, experiment_id: i64) -> Result<Vec<i64>, StoreError> {
        let mut stmt = self.conn.prepare("SELECT id FROM peers WHERE experiment_id = ?1 ORDER BY id")?;
        let ids = stmt.query_map([experiment_id], |r| r.get(0))?.collect::<Result<_, _>>()?;
        Ok(ids)
    }

    /// Looks a peer up by name. Without an experiment, the most recent
    /// experiment holding that name wins.
    pub fn find_peer(&self, experiment_id: Option<i64>, name: &str) -> Result<Option<i64>, StoreError> {
        let id = match experiment_id {
            Some(e) => self
                .conn
                .query_row("SELECT id FROM peers WHERE experiment_id = ?1 AND name = ?2", params![e, name], |r| r.get(0))
                .optional()?,
            None => self
                .conn
                .query_row("SELECT id FROM peers WHERE name = ?1 ORDER BY experiment_id DESC LIMIT 1", [name], |r| {
                    r.get(0)
                })
                .optional()?,
        };
        Ok(id)
    }

    /// Removes a peer with all its status and verbose rows.
    pub fn delete_peer(&mut self, peer_id: i64) -> Result<(), StoreError> {
        if self.conn.execute("DELETE FROM peers WHERE id = ?1", [peer_id])? == 0 {
            return Err(StoreError::UnknownPeer(peer_id));
        }
        Ok(())
    }

    fn require_peer(tx: &Transaction, peer_id: i64) -> Result<i64, StoreError> {
        tx.query_row("SELECT next_seq FROM peers WHERE id = ?1", [peer_id], |r| r.get(0))
            .optional()?
            .ok_or(StoreError::UnknownPeer(peer_id))
    }

    fn bump_seq(tx: &Transaction, peer_id: i64, next: i64) -> Result<(), StoreError> {
        tx.execute("UPDATE peers SET next_seq = ?2 WHERE id = ?1", params![peer_id, next])?;
        Ok(())
    }

    /// Inserts all records or none.
    pub fn insert_status_batch(&mut self, peer_id: i64, records: &[StatusRecord]) -> Result<usize, StoreError> {
        let tx = self.conn.transaction()?;
        let mut seq = Self::require_peer(&tx, peer_id)?;
        {
            let mut stmt = tx.prepare_cached(
                "INSERT INTO status (peer_id, ts, seq, down_speed, up_speed, downloaded, uploaded, eta, num_peers, percent, size, file_name)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12)",
            )?;
            for r in records {
                r.validate().map_err(StoreError::ConstraintViolation)?;
                let eta = match r.eta {
                    Eta::Seconds(s) => Some(to_i64(s)?),
                    Eta::Infinite => None,
                };
                stmt.execute(params![
                    peer_id,
                    r.timestamp.0,
                    seq,
                    to_i64(r.down_speed)?,
                    to_i64(r.up_speed)?,
                    to_i64(r.downloaded)?,
                    to_i64(r.uploaded)?,
                    eta,
                    r.num_peers,
                    r.percent.0,
                    to_i64(r.transfer_size)?,
                    r.file_name
                ])?;
                seq += 1;
            }
        }
        Self::bump_seq(&tx, peer_id, seq)?;
        tx.commit()?;
        Ok(records.len())
    }

    /// Inserts all records or none. Identical records may be inserted any
    /// number of times.
    pub fn insert_verbose_batch(&mut self, peer_id: i64, records: &[VerboseRecord]) -> Result<usize, StoreError> {
        let tx = self.conn.transaction()?;
        let mut seq = Self::require_peer(&tx, peer_id)?;
        {
            let mut stmt = tx.prepare_cached(
                "INSERT INTO verbose (peer_id, ts, seq, dir, kind, remote, piece, begin, length, bitfield)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10)",
            )?;
            for r in records {
                r.validate().map_err(StoreError::ConstraintViolation)?;
                let remote = intern(&tx, &mut self.remotes, &r.remote_peer)?;
                stmt.execute(params![
                    peer_id,
                    r.timestamp.0,
                    seq,
                    r.direction.code(),
                    r.kind.code(),
                    remote,
                    r.piece_index,
                    r.block_offset,
                    r.block_length,
                    r.bitfield_hex.as_deref().map(hex_to_bytes)
                ])?;
                seq += 1;
            }
        }
        Self::bump_seq(&tx, peer_id, seq)?;
        match tx.commit() {
            Ok(()) => Ok(records.len()),
            Err(e) => {
                self.remotes.clear();
                Err(e.into())
            }
        }
    }

    /// Streams records into the store in [`INGEST_BATCH`]-row transactions.
    pub fn ingest_verbose<I, E>(&mut self, peer_id: i64, records: I) -> Result<usize, StoreError>
    where
        I: IntoIterator<Item = Result<VerboseRecord, E>>,
        E: std::fmt::Display,
    {
        let mut batch = Vec::with_capacity(INGEST_BATCH);
        let mut total = 0;
        for rec in records {
            batch.push(rec.map_err(|e| StoreError::BadInput(e.to_string()))?);
            if batch.len() == INGEST_BATCH {
                total += self.insert_verbose_batch(peer_id, &batch)?;
                batch.clear();
            }
        }
        total += self.insert_verbose_batch(peer_id, &batch)?;
        Ok(total)
    }

    pub fn ingest_status<I, E>(&mut self, peer_id: i64, records: I) -> Result<usize, StoreError>
    where
        I: IntoIterator<Item = Result<StatusRecord, E>>,
        E: std::fmt::Display,
    {
        let mut batch = Vec::with_capacity(INGEST_BATCH);
        let mut total = 0;
        for rec in records {
            batch.push(rec.map_err(|e| StoreError::BadInput(e.to_string()))?);
            if batch.len() == INGEST_BATCH {
                total += self.insert_status_batch(peer_id, &batch)?;
                batch.clear();
            }
        }
        total += self.insert_status_batch(peer_id, &batch)?;
        Ok(total)
    }

    /// Verbose rows with `window.start <= ts < window.end`, optionally
    /// restricted to some kinds, ordered by time then insertion.
    pub fn query_messages(
        &self,
        peer_id: i64,
        window: Window,
        kinds: Option<&[MessageKind]>,
    ) -> Result<Vec<VerboseRecord>, StoreError> {
        window.check()?;
        self.peer(peer_id)?;
        let mut sql = String::from(
            "SELECT v.ts, v.dir, v.kind, r.addr, v.piece, v.begin, v.length, v.bitfield
             FROM verbose v JOIN remotes r ON r.id = v.remote
             WHERE v.peer_id = ?1 AND v.ts >= ?2 AND v.ts < ?3",
        );
        if let Some(kinds) = kinds {
            let codes: Vec<String> = kinds.iter().map(|k| k.code().to_string()).collect();
            sql.push_str(&format!(" AND v.kind IN ({})", codes.join(",")));
        }
        sql.push_str(" ORDER BY v.ts, v.seq");
        let mut stmt = self.conn.prepare(&sql)?;
        let rows = stmt.query_map(params![peer_id, window.start.0, window.end.0], |r| {
            Ok(VerboseRecord {
                timestamp: Timestamp(r.get(0)?),
                direction: Direction::from_code(r.get(1)?).unwrap_or(Direction::Sent),
                kind: MessageKind::from_code(r.get(2)?).unwrap_or(MessageKind::Choke),
                remote_peer: r.get(3)?,
                piece_index: r.get(4)?,
                block_offset: r.get(5)?,
                block_length: r.get(6)?,
                bitfield_hex: r.get::<_, Option<Vec<u8>>>(7)?.map(|b| bytes_to_hex(&b)),
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Row count of [`Store::query_messages`] without materialising rows.
    pub fn count_messages(&self, peer_id: i64, window: Window) -> Result<u64, StoreError> {
        window.check()?;
        self.peer(peer_id)?;
        let n: i64 = self.conn.query_row(
            "SELECT count(*) FROM verbose WHERE peer_id = ?1 AND ts >= ?2 AND ts < ?3",
            params![peer_id, window.start.0, window.end.0],
            |r| r.get(0),
        )?;
        Ok(n as u64)
    }

    /// Per (direction, kind) counts in a window.
    pub fn message_counts(&self, peer_id: i64, window: Window) -> Result<Vec<(Direction, MessageKind, u64)>, StoreError> {
        window.check()?;
        self.peer(peer_id)?;
        let mut stmt = self.conn.prepare(
            "SELECT dir, kind, count(*) FROM verbose WHERE peer_id = ?1 AND ts >= ?2 AND ts < ?3
             GROUP BY dir, kind ORDER BY dir, kind",
        )?;
        let rows = stmt.query_map(params![peer_id, window.start.0, window.end.0], |r| {
            Ok((r.get::<_, i64>(0)?, r.get::<_, i64>(1)?, r.get::<_, i64>(2)?))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (dir, kind, n) = row?;
            let dir = Direction::from_code(dir).ok_or_else(|| StoreError::CorruptStore(format!("direction {dir}")))?;
            let kind = MessageKind::from_code(kind).ok_or_else(|| StoreError::CorruptStore(format!("kind {kind}")))?;
            out.push((dir, kind, n as u64));
        }
        Ok(out)
    }

    pub fn query_status(&self, peer_id: i64, window: Window) -> Result<Vec<StatusRecord>, StoreError> {
        window.check()?;
        self.peer(peer_id)?;
        let mut stmt = self.conn.prepare(
            "SELECT ts, down_speed, up_speed, downloaded, uploaded, eta, num_peers, percent, size, file_name
             FROM status WHERE peer_id = ?1 AND ts >= ?2 AND ts < ?3 ORDER BY ts, seq",
        )?;
        let rows = stmt.query_map(params![peer_id, window.start.0, window.end.0], |r| {
            Ok(StatusRecord {
                timestamp: Timestamp(r.get(0)?),
                down_speed: r.get::<_, i64>(1)? as u64,
                up_speed: r.get::<_, i64>(2)? as u64,
                downloaded: r.get::<_, i64>(3)? as u64,
                uploaded: r.get::<_, i64>(4)? as u64,
                eta: r.get::<_, Option<i64>>(5)?.map_or(Eta::Infinite, |s| Eta::Seconds(s as u64)),
                num_peers: r.get(6)?,
                percent: Percent(r.get(7)?),
                transfer_size: r.get::<_, i64>(8)? as u64,
                file_name: r.get(9)?,
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// First and last status timestamps of a peer.
    pub fn status_span(&self, peer_id: i64) -> Result<Option<(Timestamp, Timestamp)>, StoreError> {
        self.peer(peer_id)?;
        let span: (Option<i64>, Option<i64>) = self.conn.query_row(
            "SELECT min(ts), max(ts) FROM status WHERE peer_id = ?1",
            [peer_id],
            |r| Ok((r.get(0)?, r.get(1)?)),
        )?;
        Ok(match span {
            (Some(a), Some(b)) => Some((Timestamp(a), Timestamp(b))),
            _ => None,
        })
    }

    /// Shrinks the file after deletions.
    pub fn vacuum(&self) -> Result<(), StoreError> {
        self.conn.execute_batch("VACUUM")?;
        Ok(())
    }

    /// Writes every row in a stable text form. Two stores with the same
    /// logical content produce identical dumps.
    pub fn canonical_dump<W: Write>(&self, out: &mut W) -> Result<(), StoreError> {
        let mut exp = self.conn.prepare(
            "SELECT id, swarm_id, num_peers, num_seeders, start_time, file_name, file_size FROM experiments ORDER BY id",
        )?;
        let mut rows = exp.query([])?;
        while let Some(r) = rows.next()? {
            writeln!(
                out,
                "experiment\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.get::<_, i64>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, i64>(2)?,
                r.get::<_, i64>(3)?,
                Timestamp(r.get(4)?),
                r.get::<_, String>(5)?,
                r.get::<_, i64>(6)?
            )?;
        }
        let mut peers = self.conn.prepare("SELECT id FROM peers ORDER BY id")?;
        let ids: Vec<i64> = peers.query_map([], |r| r.get(0))?.collect::<Result<_, _>>()?;
        for id in ids {
            let p = self.peer(id)?;
            let opt = |v: Option<u64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
            writeln!(
                out,
                "peer\t{id}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                p.experiment_id,
                p.name,
                p.client_name,
                p.addr,
                opt(p.down_limit),
                opt(p.up_limit),
                p.cpu_description,
                opt(p.ram_bytes),
                p.os_version,
                p.net_info
            )?;
            for s in self.query_status(id, Window::all())? {
                writeln!(out, "status\t{id}\t{s}")?;
            }
            for v in self.query_messages(id, Window::all(), None)? {
                writeln!(out, "verbose\t{id}\t{v}")?;
            }
        }
        Ok(())
    }
}

fn intern(tx: &Transaction, cache: &mut HashMap<String, i64>, addr: &str) -> Result<i64, StoreError> {
    if let Some(&id) = cache.get(addr) {
        return Ok(id);
    }
    tx.execute("INSERT OR IGNORE INTO remotes (addr) VALUES (?1)", [addr])?;
    let id: i64 = tx.query_row("SELECT id FROM remotes WHERE addr = ?1", [addr], |r| r.get(0))?;
    cache.insert(addr.to_string(), id);
    Ok(id)
}

/// What [`ingest_log_files`] read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IngestCounts {
    pub status: usize,
    pub verbose: usize,
    /// Verbose lines without a recognised message kind.
    pub skipped: u64,
    pub raw_bytes: u64,
}

/// Streams a status log and a set of verbose logs into one peer. The verbose
/// dialect is detected from the file names.
pub fn ingest_log_files(
    store: &mut Store,
    peer_id: i64,
    slog: Option<&Path>,
    vlogs: &[PathBuf],
) -> Result<IngestCounts, StoreError> {
    use std::io::BufReader;
    let open = |p: &Path| {
        std::fs::File::open(p).map(BufReader::new).map_err(|e| StoreError::BadInput(format!("{}: {e}", p.display())))
    };
    let mut counts = IngestCounts::default();
    if let Some(slog) = slog {
        counts.raw_bytes += std::fs::metadata(slog)?.len();
        counts.status = store.ingest_status(peer_id, StatusReader::new(open(slog)?))?;
    }
    if vlogs.is_empty() {
        return Ok(counts);
    }
    let dialect = detect_dialect(vlogs).map_err(|e| StoreError::BadInput(e.to_string()))?;
    for path in vlogs {
        counts.raw_bytes += std::fs::metadata(path)?.len();
        let file_peer = match dialect {
            VlogDialect::PerPeerFiles => peer_from_file_name(path),
            VlogDialect::UnifiedFile => None,
        };
        let mut reader = VerboseReader::new(open(path)?, file_peer);
        counts.verbose += store.ingest_verbose(peer_id, reader.by_ref())?;
        counts.skipped += reader.skipped();
    }
    Ok(counts)
}

/// `store_file_bytes / raw_log_bytes`.
pub fn compact_ratio(raw_log_bytes: u64, store: &Store) -> Result<f64, StoreError> {
    if raw_log_bytes == 0 {
        return Err(StoreError::BadInput("no raw log bytes".into()));
    }
    Ok(store.file_bytes()? as f64 / raw_log_bytes as f64)
}
