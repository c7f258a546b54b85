use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use super::{SimConfig, SimEvent, SimResult};
use crate::logs::{per_peer_file_name, VlogDialect};

/// Files written for one peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogPaths {
    pub peer_id: String,
    pub slog: PathBuf,
    /// One file for the unified dialect, one per remote peer otherwise.
    pub vlogs: Vec<PathBuf>,
}

/// Writes one peer's status log and verbose log(s).
pub fn emit_peer_logs(
    config: &SimConfig,
    result: &SimResult,
    peer: usize,
    dialect: VlogDialect,
    slog: &Path,
    vlog: &Path,
) -> io::Result<LogPaths> {
    stream_peer_logs(config, result, peer, dialect, slog, vlog, Duration::ZERO)
}

struct VlogSink<'a> {
    dialect: VlogDialect,
    vlog: &'a Path,
    unified: Option<BufWriter<File>>,
    per_peer: BTreeMap<usize, BufWriter<File>>,
    paths: Vec<PathBuf>,
}

impl VlogSink<'_> {
    fn write(&mut self, config: &SimConfig, peer: usize, event: &SimEvent) -> io::Result<()> {
        let record = event.record_for(config, peer);
        match self.dialect {
            VlogDialect::UnifiedFile => {
                let out = self.unified.as_mut().expect("opened up front");
                writeln!(out, "{}", record.render(true))
            }
            VlogDialect::PerPeerFiles => {
                let remote = if event.from == peer { event.to } else { event.from };
                let out = match self.per_peer.entry(remote) {
                    Entry::Occupied(e) => e.into_mut(),
                    Entry::Vacant(e) => {
                        let path = per_peer_file_name(self.vlog, &config.peers[remote].addr);
                        self.paths.push(path.clone());
                        e.insert(BufWriter::new(File::create(path)?))
                    }
                };
                writeln!(out, "{}", record.render(false))
            }
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        if let Some(out) = &mut self.unified {
            out.flush()?;
        }
        for out in self.per_peer.values_mut() {
            out.flush()?;
        }
        Ok(())
    }
}

/// Like [`emit_peer_logs`], but writes tick by tick, flushing after each
/// tick and waiting `pace` of wall-clock time between ticks, the way a live
/// client fills its logs.
pub fn stream_peer_logs(
    config: &SimConfig,
    result: &SimResult,
    peer: usize,
    dialect: VlogDialect,
    slog: &Path,
    vlog: &Path,
    pace: Duration,
) -> io::Result<LogPaths> {
    let mut status_out = BufWriter::new(File::create(slog)?);
    let mut sink = VlogSink {
        dialect,
        vlog,
        unified: match dialect {
            VlogDialect::UnifiedFile => Some(BufWriter::new(File::create(vlog)?)),
            VlogDialect::PerPeerFiles => None,
        },
        per_peer: BTreeMap::new(),
        paths: Vec::new(),
    };
    if dialect == VlogDialect::UnifiedFile {
        sink.paths.push(vlog.to_path_buf());
    }

    let tick_of = |ts: i64| ((ts - config.start_time.0) / i64::from(config.tick)) as u32;
    let status = &result.status[peer];
    let mut events = result.events_for(peer).peekable();
    let first_tick = status.first().map(|r| tick_of(r.timestamp.0)).unwrap_or(0);
    let began = Instant::now();
    let mut i = 0;
    while i < status.len() || events.peek().is_some() {
        let tick = match (status.get(i), events.peek()) {
            (Some(r), Some(e)) => tick_of(r.timestamp.0).min(e.tick),
            (Some(r), None) => tick_of(r.timestamp.0),
            (None, Some(e)) => e.tick,
            (None, None) => unreachable!(),
        };
        if !pace.is_zero() {
            let due = began + pace * tick.saturating_sub(first_tick);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        while let Some(e) = events.next_if(|e| e.tick == tick) {
            sink.write(config, peer, e)?;
        }
        while let Some(r) = status.get(i).filter(|r| tick_of(r.timestamp.0) == tick) {
            writeln!(status_out, "{r}")?;
            i += 1;
        }
        if !pace.is_zero() {
            sink.flush()?;
            status_out.flush()?;
        }
    }
    sink.flush()?;
    status_out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    let mut vlogs = sink.paths;
    vlogs.sort();
    Ok(LogPaths { peer_id: config.peers[peer].peer_id.clone(), slog: slog.to_path_buf(), vlogs })
}

/// Writes `<dir>/<peer_id>.slog` and `<dir>/<peer_id>.vlog` (plus per-peer
/// suffixes) for every peer of the run.
pub fn emit_logs(
    config: &SimConfig,
    result: &SimResult,
    dialect: VlogDialect,
    dir: &Path,
) -> io::Result<Vec<LogPaths>> {
    std::fs::create_dir_all(dir)?;
    (0..config.peers.len())
        .map(|peer| {
            let id = &config.peers[peer].peer_id;
            let slog = dir.join(format!("{id}.slog"));
            let vlog = dir.join(format!("{id}.vlog"));
            emit_peer_logs(config, result, peer, dialect, &slog, &vlog)
        })
        .collect()
}
