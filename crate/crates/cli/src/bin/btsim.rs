//! Simulated BitTorrent client.
//!
//! Every btsim process of one experiment reads the same roster and computes
//! the same deterministic swarm, then plays back only its own peer's logs,
//! one simulated second every `--tick-ms` milliseconds.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Parser;
use log::warn;

use swarmforge::sim::{self, Role, Roster, SimPeer, SimTorrent};
use swarmforge::VlogDialect;

const UNLIMITED: u64 = 1 << 30;

#[derive(Parser, Debug)]
#[command(name = "btsim", version, about = "Deterministic simulated BitTorrent client")]
struct Args {
    /// Content description (JSON with name, length, piece_length, block_length).
    #[arg(long)]
    torrent: PathBuf,
    #[arg(long, default_value = "leecher")]
    role: String,
    /// Download cap in bytes/s.
    #[arg(long)]
    down: Option<u64>,
    /// Upload cap in bytes/s.
    #[arg(long)]
    up: Option<u64>,
    #[arg(long)]
    slog: PathBuf,
    #[arg(long)]
    vlog: PathBuf,
    #[arg(long, default_value = "unified")]
    dialect: String,
    #[arg(long)]
    download_dir: PathBuf,
    /// Shared swarm description; without it the client joins a private
    /// swarm with one seeder.
    #[arg(long)]
    roster: Option<PathBuf>,
    /// This client's entry in the roster.
    #[arg(long)]
    peer_id: Option<String>,
    /// Wall-clock milliseconds per simulated second; 0 writes everything at once.
    #[arg(long, default_value_t = 1000)]
    tick_ms: u64,
    /// Seed of a standalone swarm.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn standalone(args: &Args, role: Role) -> (Roster, String) {
    let me = "local".to_string();
    let mut peers = vec![SimPeer::new(
        &me,
        "10.0.0.2:6881",
        role,
        args.down.unwrap_or(UNLIMITED),
        args.up.unwrap_or(UNLIMITED),
    )];
    if role == Role::Leecher {
        let up = args.down.unwrap_or(UNLIMITED);
        peers.insert(0, SimPeer::new("origin", "10.0.0.1:6881", Role::Seeder, up, up));
    }
    (Roster::new(args.seed, peers), me)
}

fn write_payload(path: &PathBuf, len: u64) -> std::io::Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let block: Vec<u8> = (0..=255u8).cycle().take(64 * 1024).collect();
    let mut left = len;
    while left > 0 {
        let n = left.min(block.len() as u64) as usize;
        out.write_all(&block[..n])?;
        left -= n as u64;
    }
    out.flush()
}

fn run(args: Args) -> Result<()> {
    let role = Role::from_token(&args.role).with_context(|| format!("unknown role `{}`", args.role))?;
    let dialect = VlogDialect::from_token(&args.dialect).with_context(|| format!("unknown dialect `{}`", args.dialect))?;
    let torrent = SimTorrent::load(&args.torrent).map_err(anyhow::Error::msg)?;
    let (roster, peer_id) = match &args.roster {
        Some(path) => {
            let roster = Roster::load(path).map_err(anyhow::Error::msg)?;
            let id = args.peer_id.clone().context("--roster needs --peer-id")?;
            (roster, id)
        }
        None => standalone(&args, role),
    };
    let config = roster.to_config(&torrent);
    let me = config.peer_index(&peer_id).with_context(|| format!("peer `{peer_id}` is not in the roster"))?;
    let spec = &config.peers[me];
    if spec.role != role {
        bail!("roster says `{peer_id}` is a {}, not a {}", spec.role.token(), role.token());
    }
    for (flag, given, cap) in [("--down", args.down, spec.down_cap), ("--up", args.up, spec.up_cap)] {
        if given.is_some_and(|g| g != cap) {
            warn!("{flag} {} ignored, the roster caps {peer_id} at {cap}", given.unwrap_or_default());
        }
    }

    let result = sim::simulate(&config)?;
    for p in [&args.slog, &args.vlog] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
    }
    fs::create_dir_all(&args.download_dir)?;
    println!("btsim: {peer_id} ({}) in a swarm of {}", role.token(), config.peers.len());
    let paths = sim::stream_peer_logs(
        &config,
        &result,
        me,
        dialect,
        &args.slog,
        &args.vlog,
        Duration::from_millis(args.tick_ms),
    )?;
    match (role, result.completed_at[me]) {
        (Role::Leecher, Some(tick)) => {
            let payload = args.download_dir.join(&torrent.name);
            write_payload(&payload, torrent.length)?;
            println!("btsim: {peer_id} completed at tick {tick}, wrote {}", payload.display());
        }
        (Role::Leecher, None) => println!("btsim: {peer_id} left before completing"),
        (Role::Seeder, _) => println!("btsim: {peer_id} seeded until tick {}", result.ticks),
    }
    println!("btsim: {} verbose file(s)", paths.vlogs.len());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Args::parse()) {
        eprintln!("btsim: {e:#}");
        std::process::exit(2);
    }
}
