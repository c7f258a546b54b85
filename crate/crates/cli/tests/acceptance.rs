//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::net::TcpStream;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, TestRunner};

use swarmforge::analysis::{acceleration_series, message_stats, plateau, speed_series, Flow, SpeedPoint, SpeedSeries};
use swarmforge::commander::exchange;
use swarmforge::sim::{emit_logs, simulate, Role, SimConfig, SimPeer, SimResult};
use swarmforge::store::{ingest_log_files, ExperimentMeta, PeerMeta, Store, Window};
use swarmforge::wire::{
    decode_command, decode_response, encode_command, encode_response, read_frame, write_frame, Status,
};
use swarmforge::{
    CommandEnvelope, CommandKind, Direction, ErrorCode, MessageKind, ResponseEnvelope, Timestamp, VerboseRecord,
    VlogDialect,
};

use common::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// Shared fixtures

fn addr(i: usize) -> String {
    format!("10.0.{}.{}:6881", i / 200, i % 200 + 1)
}

const FAST: (u64, u64) = (524_288, 262_144);
const SLOW: (u64, u64) = (65_536, 32_768);

/// One seeder with an upload slot per leecher, then `fast` leechers of the
/// fast class and `slow` of the slow class.
fn two_class(seed: u64, fast: usize, slow: usize, file_size: u64) -> SimConfig {
    let n = 1 + fast + slow;
    let mut origin = SimPeer::new("origin", &addr(0), Role::Seeder, 1 << 30, 8 << 20);
    origin.upload_slots = Some(n - 1);
    let mut peers = vec![origin];
    for i in 1..n {
        let (class, (down, up)) = if i <= fast { ("fast", FAST) } else { ("slow", SLOW) };
        peers.push(SimPeer::new(&format!("{class}-{i}"), &addr(i), Role::Leecher, down, up));
    }
    SimConfig::new(seed, peers, file_size, 65_536, 16_384)
}

struct Ingested {
    _dir: tempfile::TempDir,
    store: Store,
    /// Store peer id per simulator peer index.
    peers: Vec<i64>,
    raw_bytes: u64,
}

/// Simulator → log files → parsers → store.
fn ingest(cfg: &SimConfig, res: &SimResult, dialect: VlogDialect, with_status: bool) -> Ingested {
    let dir = tempfile::tempdir().unwrap();
    let logs = emit_logs(cfg, res, dialect, &dir.path().join("logs")).unwrap();
    let mut store = Store::open(&dir.path().join("experiment.db")).unwrap();
    let experiment = store
        .add_experiment(&ExperimentMeta {
            swarm_id: "acceptance".into(),
            num_peers: cfg.peers.len() as u32,
            num_seeders: cfg.peers.iter().filter(|p| p.role == Role::Seeder).count() as u32,
            start_time: cfg.start_time,
            file_name: cfg.file_name.clone(),
            file_size: cfg.file_size,
        })
        .unwrap();
    let mut peers = Vec::new();
    let mut raw_bytes = 0;
    for (peer, paths) in cfg.peers.iter().zip(&logs) {
        let id = store
            .add_peer(&PeerMeta {
                experiment_id: experiment,
                name: peer.peer_id.clone(),
                client_name: "simulated".into(),
                addr: peer.addr.clone(),
                down_limit: Some(peer.down_cap),
                up_limit: Some(peer.up_cap),
                ..Default::default()
            })
            .unwrap();
        let slog = with_status.then_some(paths.slog.as_path());
        raw_bytes += ingest_log_files(&mut store, id, slog, &paths.vlogs).unwrap().raw_bytes;
        peers.push(id);
    }
    Ingested { _dir: dir, store, peers, raw_bytes }
}

type RecordKey = (i64, i64, i64, String, Option<u32>, Option<u32>, Option<u32>, Option<String>);

fn record_key(r: &VerboseRecord) -> RecordKey {
    (
        r.timestamp.0,
        r.direction.code(),
        r.kind.code(),
        r.remote_peer.clone(),
        r.piece_index,
        r.block_offset,
        r.block_length,
        r.bitfield_hex.clone(),
    )
}

fn sorted(mut records: Vec<VerboseRecord>) -> Vec<VerboseRecord> {
    records.sort_by_cached_key(record_key);
    records
}

// ---------------------------------------------------------------------------
// 1. Wire protocol

fn arb_value() -> impl Strategy<Value = String> {
    prop_oneof![any::<String>(), "[ -~\\\\\n\r\t]{0,40}", Just(String::new()), Just("\\n\\\\".to_string())]
}

fn arb_command() -> impl Strategy<Value = CommandEnvelope> {
    let kind = prop::sample::select(CommandKind::ALL.to_vec());
    let extra = prop::collection::btree_map("X_[A-Z_]{1,10}", arb_value(), 0..5);
    (kind, extra, arb_value(), "[0-9]{1,6}", prop::sample::subsequence(vec!["ALL", "DOWN", "VLOGS", "SLOGS", "ARCHIVE"], 1..=5))
        .prop_map(|(kind, extra, text, id, flags)| {
            let mut cmd = CommandEnvelope::new(kind);
            for key in kind.required_keys() {
                cmd = cmd.arg(key, if *key == "ID" { id.clone() } else { text.clone() });
            }
            if kind == CommandKind::Cleanup {
                for f in flags {
                    cmd = cmd.arg(f, "1");
                }
            }
            for (k, v) in extra {
                cmd = cmd.arg(&k, v);
            }
            cmd
        })
}

fn arb_response() -> impl Strategy<Value = ResponseEnvelope> {
    let code = prop::option::of(prop::sample::select(ErrorCode::ALL.to_vec()));
    let body = prop::collection::btree_map("[a-z0-9_]{1,12}", arb_value(), 0..6);
    (code, body).prop_map(|(code, body)| {
        let mut r = match code {
            Some(c) => ResponseEnvelope::err(c),
            None => ResponseEnvelope::ok(),
        };
        for (k, v) in body {
            r = r.with(&k, v);
        }
        r
    })
}

/// A frame around a raw payload, bypassing envelope validation.
fn frame(payload: &str) -> Vec<u8> {
    let mut f = (payload.len() as u32).to_be_bytes().to_vec();
    f.extend(payload.as_bytes());
    f
}

fn raw_exchange(addr: std::net::SocketAddr, frame: &[u8]) -> ResponseEnvelope {
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(frame).unwrap();
    let reply = read_frame(&mut s).unwrap().expect("agent replies before closing");
    decode_response(&reply).unwrap()
}

fn wire_protocol() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    runner
        .run(&arb_command(), |cmd| {
            prop_assert_eq!(decode_command(&encode_command(&cmd).unwrap()).unwrap(), cmd);
            Ok(())
        })
        .map_err(|e| format!("command round trip: {e}"))?;
    runner
        .run(&arb_response(), |resp| {
            prop_assert_eq!(decode_response(&encode_response(&resp).unwrap()).unwrap(), resp);
            Ok(())
        })
        .map_err(|e| format!("response round trip: {e}"))?;

    let dir = tempfile::tempdir().unwrap();
    let torrent = write_torrent(dir.path(), 1 << 20);
    let agent = btsim_agent(&dir.path().join("state"), "/nonexistent/btsim");
    let running = agent.bind("127.0.0.1", 0).map_err(|e| e.to_string())?;
    let (host, port) = ("127.0.0.1", running.addr().port());
    let send = |cmd: CommandEnvelope| exchange(host, port, &cmd).map_err(|e| e.to_string());
    let id_cmd = |kind, id: &str| CommandEnvelope::new(kind).arg("ID", id);
    let start = |client: &str| {
        CommandEnvelope::new(CommandKind::StartClient)
            .arg("TORRENT", torrent.display().to_string())
            .arg("DOWN_DIR", dir.path().join("down").display().to_string())
            .arg("SLOG", dir.path().join("logs/p.slog").display().to_string())
            .arg("VLOG", dir.path().join("logs/p.vlog").display().to_string())
            .arg("CLIENT", client)
            .arg("ROLE", "leecher")
            .arg("DOWN", "512K")
            .arg("UP", "256K")
            .arg("X_TICK_MS", "5")
    };

    let mut used = Vec::new();
    let started = send(start("simulated"))?;
    ensure!(started.get("id") == Some("1"), "START-CLIENT: {started}");
    used.push(CommandKind::StartClient);
    let clients = send(CommandEnvelope::new(CommandKind::GetClients))?;
    ensure!(clients.get("clients") == Some("1"), "GET-CLIENTS: {clients}");
    used.push(CommandKind::GetClients);
    let state = wait_exit(&agent, 1);
    ensure!(state == "EXITED", "session ended {state}");
    let status = send(id_cmd(CommandKind::GetStatus, "1"))?;
    ensure!(status.get("eta") == Some("0") && status.get("downloaded") == Some("1048576"), "GET-STATUS: {status}");
    used.push(CommandKind::GetStatus);
    let output = send(id_cmd(CommandKind::GetOutput, "1"))?;
    ensure!(output.is_ok() && output.get("output").is_some(), "GET-OUTPUT: {output}");
    used.push(CommandKind::GetOutput);
    let stopped = send(id_cmd(CommandKind::StopClient, "1"))?;
    ensure!(stopped.is_ok(), "STOP-CLIENT: {stopped}");
    used.push(CommandKind::StopClient);
    let archived = send(id_cmd(CommandKind::Archive, "1").arg("NAME", "p"))?;
    ensure!(archived.is_ok() && Path::new(archived.get("path").unwrap_or_default()).exists(), "ARCHIVE: {archived}");
    used.push(CommandKind::Archive);
    let cleaned = send(CommandEnvelope::new(CommandKind::Cleanup).arg("ALL", "1"))?;
    // The payload and the archive; the logs went into the archive.
    ensure!(cleaned.get("removed") == Some("2"), "CLEANUP: {cleaned}");
    used.push(CommandKind::Cleanup);
    ensure!(used.len() == CommandKind::ALL.len(), "exercised {used:?}");

    let missing = dir.path().join("never-written").display().to_string();
    let crafted = [
        ("unknown command", ErrorCode::UnknownCmd, raw_exchange(running.addr(), &frame("FLY-TO-MOON"))),
        ("missing ID", ErrorCode::BadArgs, raw_exchange(running.addr(), &frame("STOP-CLIENT"))),
        ("unknown id", ErrorCode::NoSuchId, send(id_cmd(CommandKind::StopClient, "77"))?),
        ("unspawnable client", ErrorCode::ClientFailed, send(start("simulated-per-peer"))?),
        (
            "archive of a missing file",
            ErrorCode::IoError,
            send(CommandEnvelope::new(CommandKind::Archive).arg("FILES", missing))?,
        ),
    ];
    let mut reached = BTreeMap::new();
    for (what, code, resp) in crafted {
        ensure!(resp.error_code == Some(code), "{what}: expected {}, got {resp}", code.token());
        reached.insert(code.token(), what);
    }
    let oversized = (u32::MAX).to_be_bytes();
    let resp = raw_exchange(running.addr(), &oversized);
    ensure!(resp.status == Status::Err, "oversized frame accepted");
    for code in ErrorCode::ALL {
        ensure!(reached.contains_key(code.token()), "{} never produced; got {reached:?}", code.token());
    }

    // An envelope error leaves the connection open.
    let mut s = TcpStream::connect(running.addr()).unwrap();
    write_frame(&mut s, &frame("GET-OUTPUT")).unwrap();
    let bad = decode_response(&read_frame(&mut s).unwrap().ok_or("no reply to a bad envelope")?).unwrap();
    ensure!(bad.error_code == Some(ErrorCode::BadArgs), "{bad}");
    write_frame(&mut s, &frame("GET-CLIENTS")).unwrap();
    let good = read_frame(&mut s).unwrap().ok_or("connection closed after an envelope error")?;
    let good = decode_response(&good).unwrap();
    ensure!(good.is_ok(), "GET-CLIENTS after an error: {good}");

    Ok(format!("2000 envelopes, 7 commands, 5 error codes ({})", reached.keys().cloned().collect::<Vec<_>>().join(" ")))
}

// ---------------------------------------------------------------------------
// 2. Two-class swarm

fn two_class_swarm() -> Outcome {
    let cfg = two_class(2010, 10, 9, 4 << 20);
    let res = simulate(&cfg).map_err(|e| e.to_string())?;
    let run = ingest(&cfg, &res, VlogDialect::UnifiedFile, true);
    let mut means: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut worst = (0.0f64, 0.0f64);
    for (i, peer) in cfg.peers.iter().enumerate().filter(|(_, p)| p.role == Role::Leecher) {
        let cap = peer.down_cap;
        let series = speed_series(&run.store, run.peers[i], Flow::Down, None).map_err(|e| e.to_string())?;
        ensure!(series.completed_at.is_some(), "{} never completed", peer.peer_id);
        let transfer = series.transfer_phase();
        let p = plateau(&transfer, cap)
            .map_err(|e| format!("{}: {e}", peer.peer_id))?
            .ok_or_else(|| format!("{} never settles", peer.peer_id))?;
        if cap == FAST.0 {
            let first = transfer.points[0].t;
            ensure!(p.ramp_end > first && p.monotone_ramp, "{}: no positive-acceleration prefix ({p:?})", peer.peer_id);
            let dev = (p.mean - cap as f64).abs() / cap as f64;
            let acc = p.max_abs_accel / cap as f64;
            ensure!(dev <= 0.10, "{}: plateau mean {:.0} is {:.1}% off its cap", peer.peer_id, p.mean, dev * 100.0);
            ensure!(acc < 0.05, "{}: |a| reaches {:.1}% of cap", peer.peer_id, acc * 100.0);
            worst = (worst.0.max(dev), worst.1.max(acc));
        }
        means.entry(cap).or_default().push(p.mean);
    }
    let avg = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    ensure!(means[&FAST.0].len() == 10 && means[&SLOW.0].len() == 9, "class sizes {:?}", means.keys());
    let ratio = avg(&means[&FAST.0]) / avg(&means[&SLOW.0]);
    ensure!((ratio / 8.0 - 1.0).abs() <= 0.15, "fast:slow plateau ratio {ratio:.3}");
    Ok(format!(
        "fast plateau within {:.2}% of cap, max |a| {:.2}% of cap, ratio {ratio:.3}",
        worst.0 * 100.0,
        worst.1 * 100.0
    ))
}

// ---------------------------------------------------------------------------
// 3. Pipeline round trip

fn round_trip() -> Outcome {
    let cfg = two_class(3, 10, 9, 16 << 20);
    let res = simulate(&cfg).map_err(|e| e.to_string())?;
    ensure!(res.events.len() >= 100_000, "only {} events", res.events.len());
    let mut compared = 0usize;
    for dialect in [VlogDialect::UnifiedFile, VlogDialect::PerPeerFiles] {
        let run = ingest(&cfg, &res, dialect, true);
        for (i, peer) in cfg.peers.iter().enumerate() {
            let expected = sorted(res.records_for(&cfg, i));
            let got = run.store.query_messages(run.peers[i], Window::all(), None).map_err(|e| e.to_string())?;
            ensure!(
                got.len() == expected.len(),
                "{} {}: {} stored, {} simulated",
                dialect.token(),
                peer.peer_id,
                got.len(),
                expected.len()
            );
            let got = sorted(got);
            if let Some(k) = (0..got.len()).find(|&k| got[k] != expected[k]) {
                return Err(format!("{} {}: {:?} != {:?}", dialect.token(), peer.peer_id, got[k], expected[k]));
            }
            let status = run.store.query_status(run.peers[i], Window::all()).map_err(|e| e.to_string())?;
            ensure!(status == res.status[i], "{} {}: status records differ", dialect.token(), peer.peer_id);
            compared += got.len();
        }
    }
    Ok(format!("{} events, {compared} records compared over both dialects", res.events.len()))
}

// ---------------------------------------------------------------------------
// 4. Request/piece correlation

/// Checks one peer's log: every piece, in either direction, follows a
/// matching outstanding request on the same link. Returns received bytes.
fn correlate(records: &[VerboseRecord]) -> Result<u64, String> {
    type Key<'a> = (&'a str, u32, u32, u32);
    let mut asked: HashMap<Key, i64> = HashMap::new();
    let mut owed: HashMap<Key, i64> = HashMap::new();
    let mut received = 0;
    for r in records {
        let (Some(p), Some(o), Some(l)) = (r.piece_index, r.block_offset, r.block_length) else { continue };
        let key = (r.remote_peer.as_str(), p, o, l);
        let ledger = match r.direction {
            Direction::Sent if r.kind == MessageKind::Piece => &mut owed,
            Direction::Sent => &mut asked,
            Direction::Received if r.kind == MessageKind::Piece => &mut asked,
            Direction::Received => &mut owed,
        };
        let slot = ledger.entry(key).or_default();
        match r.kind {
            MessageKind::Request => *slot += 1,
            MessageKind::Cancel => *slot -= 1,
            MessageKind::Piece => {
                if *slot <= 0 {
                    return Err(format!("{} piece {p}/{o}/{l} {} {} without a request", r.timestamp, r.direction.token(), r.remote_peer));
                }
                *slot -= 1;
                if r.direction == Direction::Received {
                    received += u64::from(l);
                }
            }
            _ => {}
        }
    }
    Ok(received)
}

fn check_run(cfg: &SimConfig, res: &SimResult, logs: impl Fn(usize) -> Vec<VerboseRecord>) -> Result<u64, String> {
    let mut pieces = 0;
    for (i, peer) in cfg.peers.iter().enumerate() {
        let records = logs(i);
        pieces += records.iter().filter(|r| r.kind == MessageKind::Piece && r.direction == Direction::Received).count() as u64;
        let received = correlate(&records).map_err(|e| format!("seed {} {}: {e}", cfg.seed, peer.peer_id))?;
        if peer.role == Role::Leecher {
            ensure!(res.completed_at[i].is_some(), "seed {} {} did not complete", cfg.seed, peer.peer_id);
            ensure!(
                received == cfg.file_size,
                "seed {} {}: received {received} bytes of {}",
                cfg.seed,
                peer.peer_id,
                cfg.file_size
            );
        }
    }
    Ok(pieces)
}

fn request_piece_correlation() -> Outcome {
    let mut runs = 0;
    let mut pieces = 0;
    // The parsed logs of a full swarm, in both dialects.
    let cfg = two_class(2010, 10, 9, 4 << 20);
    let res = simulate(&cfg).map_err(|e| e.to_string())?;
    for dialect in [VlogDialect::UnifiedFile, VlogDialect::PerPeerFiles] {
        let run = ingest(&cfg, &res, dialect, false);
        pieces += check_run(&cfg, &res, |i| run.store.query_messages(run.peers[i], Window::all(), None).unwrap())?;
        runs += 1;
    }
    // Simulator output over varied swarms, including odd file sizes and
    // late joiners.
    let mut runner = TestRunner::deterministic();
    let shape = (any::<u64>(), 1usize..8, 0usize..8, 1u64..3_000_000, 0u32..4);
    for _ in 0..40 {
        let (seed, fast, slow, size, late) = shape.new_tree(&mut runner).unwrap().current();
        let mut cfg = two_class(seed, fast, slow, size);
        for p in cfg.peers.iter_mut().skip(1).step_by(2) {
            p.start_tick = late;
        }
        let res = simulate(&cfg).map_err(|e| e.to_string())?;
        pieces += check_run(&cfg, &res, |i| res.records_for(&cfg, i))?;
        runs += 1;
    }
    Ok(format!("{runs} runs, {pieces} received pieces all matched, every leecher received exactly file_size"))
}

// ---------------------------------------------------------------------------
// 5. Storage compaction

fn compaction() -> Outcome {
    let cfg = two_class(5, 20, 19, 40 << 20);
    let res = simulate(&cfg).map_err(|e| e.to_string())?;
    let run = ingest(&cfg, &res, VlogDialect::UnifiedFile, false);
    ensure!(run.raw_bytes >= 100_000_000, "corpus is only {} bytes", run.raw_bytes);
    let stored = run.store.file_bytes().map_err(|e| e.to_string())?;
    let ratio = stored as f64 / run.raw_bytes as f64;
    ensure!(ratio < 0.5, "store is {ratio:.3} of the raw logs");
    Ok(format!("{} raw bytes -> {stored} stored, ratio {ratio:.3}", run.raw_bytes))
}

// ---------------------------------------------------------------------------
// 6. Analysis oracles

fn analysis_oracles() -> Outcome {
    let series = prop::collection::vec((1i64..=30, 0u64..=(1 << 40)), 2..300);
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    runner
        .run(&series, |steps| {
            let mut t = 0;
            let points: Vec<SpeedPoint> = steps
                .iter()
                .map(|&(gap, v)| {
                    t += gap;
                    SpeedPoint { t, v }
                })
                .collect();
            let speed = SpeedSeries::from_points(1, Flow::Down, points.clone());
            let accel = acceleration_series(&speed).unwrap();
            prop_assert_eq!(accel.points.len(), points.len() - 1);
            for (i, a) in accel.points.iter().enumerate() {
                let (v0, v1) = (i128::from(points[i].v), i128::from(points[i + 1].v));
                let dt = i128::from(points[i + 1].t - points[i].t);
                prop_assert_eq!(a.t, points[i].t);
                // a = dv/dt exactly, as a fraction.
                prop_assert_eq!(i128::from(a.dv) * dt, (v1 - v0) * i128::from(a.dt));
                prop_assert_eq!(i128::from(a.dt), dt);
            }
            let first = points[0].v as i64;
            let last = points[points.len() - 1].v as i64;
            prop_assert_eq!(accel.integral(), last - first);
            Ok(())
        })
        .map_err(|e| format!("finite differences: {e}"))?;

    // message_stats against row counts and an independent tally.
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(&dir.path().join("m.db")).unwrap();
    let start = Timestamp(1_000_000);
    let exp = store
        .add_experiment(&ExperimentMeta {
            swarm_id: "m".into(),
            num_peers: 2,
            num_seeders: 1,
            start_time: start,
            file_name: "f".into(),
            file_size: 1,
        })
        .unwrap();
    let peer = store.add_peer(&PeerMeta { experiment_id: exp, name: "p".into(), ..Default::default() }).unwrap();
    let other = store.add_peer(&PeerMeta { experiment_id: exp, name: "q".into(), ..Default::default() }).unwrap();
    let record = (0i64..600, any::<bool>(), prop::sample::select(MessageKind::ALL.to_vec()), 0usize..4).prop_map(
        |(dt, sent, kind, remote)| {
            let dir = if sent { Direction::Sent } else { Direction::Received };
            let r = VerboseRecord::new(start.offset(dt), dir, kind, &addr(remote));
            match kind {
                MessageKind::Request | MessageKind::Piece | MessageKind::Cancel => r.with_block(7, 0, 16_384),
                MessageKind::Have => r.with_piece(7),
                MessageKind::Bitfield => r.with_bitfield("f0".into()),
                _ => r,
            }
        },
    );
    let mut runner = TestRunner::new(Config { cases: 1, failure_persistence: None, ..Config::default() });
    let mut records = prop::collection::vec(record, 20_000).new_tree(&mut runner).unwrap().current();
    records.sort_by_key(|r| r.timestamp);
    let (mine, theirs) = records.split_at(records.len() / 2);
    store.insert_verbose_batch(peer, mine).map_err(|e| e.to_string())?;
    store.insert_verbose_batch(other, theirs).map_err(|e| e.to_string())?;
    let windows = prop::collection::vec((-50i64..650, 0i64..700), 300);
    let picks = windows.new_tree(&mut runner).unwrap().current();
    for (a, len) in picks {
        let window = Window::new(start.offset(a), start.offset(a + len + 1));
        let stats = message_stats(&store, peer, window).map_err(|e| e.to_string())?;
        let rows = store.count_messages(peer, window).map_err(|e| e.to_string())?;
        ensure!(stats.total() == rows, "window {a}+{len}: stats {} rows {rows}", stats.total());
        for kind in MessageKind::ALL {
            let tally = |d: Direction| {
                mine.iter()
                    .filter(|r| r.kind == kind && r.direction == d && r.timestamp >= window.start && r.timestamp < window.end)
                    .count() as u64
            };
            ensure!(stats.sent(kind) == tally(Direction::Sent), "{kind:?} sent in {a}+{len}");
            ensure!(stats.received(kind) == tally(Direction::Received), "{kind:?} received in {a}+{len}");
        }
    }
    Ok("1000 random series exact, telescoping exact, 300 windows of message_stats match".into())
}

// ---------------------------------------------------------------------------
// 7. End-to-end scenario

fn commander_run(root: &Path, tag: &str, seed: u64) -> Result<PathBuf, String> {
    let work = root.join(tag);
    fs::create_dir_all(&work).unwrap();
    let torrent = write_torrent(root, 1 << 20);
    let nodes = work.join("nodes.xml");
    let swarm = work.join("swarm.xml");
    fs::write(&nodes, cluster_xml([free_port(), free_port(), free_port()])).unwrap();
    fs::write(&swarm, swarm_xml(seed, &torrent)).unwrap();
    let out = Command::new(SWARMFORGE)
        .args(["commander", "--nodes"])
        .arg(&nodes)
        .arg("--swarm")
        .arg(&swarm)
        .arg("--work-dir")
        .arg(&work)
        .args(["--tick-ms", "40", "run"])
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure!(out.status.success(), "{tag}: exit {:?}\n{stdout}{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    let db = work.join("experiment.db");
    ensure!(db.is_file(), "{tag}: no store");
    for peer in ["origin", "fast-a", "fast-b", "slow-a", "slow-b"] {
        ensure!(work.join(format!("archives/{peer}.tar.gz")).is_file(), "{tag}: no archive for {peer}");
        ensure!(stdout.contains(&format!("peer={peer}\t")), "{tag}: {peer} missing from the report");
    }
    let leechers: Vec<&str> = stdout.lines().filter(|l| l.contains("\trole=leecher\t")).collect();
    ensure!(leechers.len() == 4, "{tag}: expected 4 leecher lines\n{stdout}");
    ensure!(leechers.iter().all(|l| l.contains("\tcompleted=true\t")), "{tag}: a leecher did not complete\n{stdout}");
    Ok(db)
}

fn dump(db: &Path) -> Result<Vec<u8>, String> {
    let out = Command::new(SWARMFORGE).arg("dump").arg("--db").arg(db).output().map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "dump failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(out.stdout)
}

fn end_to_end() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let first = dump(&commander_run(root.path(), "first", 99)?)?;
    let second = dump(&commander_run(root.path(), "second", 99)?)?;
    ensure!(!first.is_empty(), "empty dump");
    if first != second {
        let a = String::from_utf8_lossy(&first);
        let b = String::from_utf8_lossy(&second);
        let line = a.lines().zip(b.lines()).find(|(x, y)| x != y);
        return Err(format!("dumps differ: {line:?}"));
    }
    let rows = first.iter().filter(|&&b| b == b'\n').count();
    Ok(format!("3 nodes, 5 sessions archived, identical {rows}-row dumps"))
}

// ---------------------------------------------------------------------------
// 8. CLEANUP matrix

struct Site {
    _dir: tempfile::TempDir,
    root: PathBuf,
    agent: swarmforge::agent::Agent,
    classes: BTreeMap<&'static str, Vec<PathBuf>>,
}

/// Two finished sessions (one per dialect), one tracked archive, and
/// canaries next to every class of file.
fn cleanup_site() -> Site {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().canonicalize().unwrap();
    let torrent = write_torrent(&root, 256 << 10);
    let agent = btsim_agent(&root.join("state"), BTSIM);
    fs::create_dir_all(root.join("down-a")).unwrap();
    fs::create_dir_all(root.join("logs")).unwrap();
    fs::create_dir_all(root.join("state/archives")).unwrap();
    fs::write(root.join("down-a/already-here.bin"), "canary").unwrap();
    fs::write(root.join("logs/notes.txt"), "canary").unwrap();
    fs::write(root.join("state/archives/foreign.tar.gz"), "canary").unwrap();
    let a = start_leecher(&agent, &root, &torrent, "simulated", "a");
    let b = start_leecher(&agent, &root, &torrent, "simulated-per-peer", "b");
    assert_eq!(wait_exit(&agent, a), "EXITED");
    assert_eq!(wait_exit(&agent, b), "EXITED");
    fs::write(root.join("extra.txt"), "archived").unwrap();
    let archived = agent.handle(
        &CommandEnvelope::new(CommandKind::Archive).arg("FILES", root.join("extra.txt").display().to_string()).arg("NAME", "extra"),
    );
    assert!(archived.is_ok(), "{archived}");

    let mut vlogs: Vec<PathBuf> =
        files_under(&root.join("logs")).into_iter().filter(|p| p.to_string_lossy().contains(".vlog")).collect();
    vlogs.sort();
    assert!(vlogs.len() >= 2, "per-peer session wrote one file per remote: {vlogs:?}");
    let classes = BTreeMap::from([
        ("DOWN", vec![root.join("down-a/payload.bin"), root.join("down-b/payload.bin")]),
        ("VLOGS", vlogs),
        ("SLOGS", vec![root.join("logs/a.slog"), root.join("logs/b.slog")]),
        ("ARCHIVE", vec![PathBuf::from(archived.get("path").unwrap())]),
    ]);
    for path in classes.values().flatten() {
        assert!(path.is_file(), "fixture lacks {}", path.display());
    }
    Site { _dir: dir, root, agent, classes }
}

/// (case name, CLEANUP keys, file classes expected to go)
type CleanupCase = (&'static str, &'static [(&'static str, &'static str)], &'static [&'static str]);

fn cleanup_matrix() -> Outcome {
    let cases: [CleanupCase; 6] = [
        ("DOWN", &[("DOWN", "1")], &["DOWN"]),
        ("VLOGS", &[("VLOGS", "1")], &["VLOGS"]),
        ("SLOGS", &[("SLOGS", "1")], &["SLOGS"]),
        ("ARCHIVE", &[("ARCHIVE", "1")], &["ARCHIVE"]),
        ("ALL", &[("ALL", "1")], &["DOWN", "VLOGS", "SLOGS", "ARCHIVE"]),
        (
            "ALL overriding zeros",
            &[("ALL", "1"), ("DOWN", "0"), ("VLOGS", "0"), ("SLOGS", "0"), ("ARCHIVE", "0")],
            &["DOWN", "VLOGS", "SLOGS", "ARCHIVE"],
        ),
    ];
    let mut canaries = 0;
    for (name, flags, classes) in cases {
        let site = cleanup_site();
        let before = files_under(&site.root);
        let mut cmd = CommandEnvelope::new(CommandKind::Cleanup);
        for (k, v) in flags {
            cmd = cmd.arg(k, *v);
        }
        let resp = site.agent.handle(&cmd);
        ensure!(resp.is_ok(), "{name}: {resp}");
        let after = files_under(&site.root);
        let gone: Vec<&PathBuf> = before.difference(&after).collect();
        let mut expected: Vec<&PathBuf> = classes.iter().flat_map(|c| &site.classes[c]).collect();
        expected.sort();
        ensure!(gone == expected, "{name}: removed {gone:?}, expected {expected:?}");
        ensure!(after.is_subset(&before), "{name}: created files");
        ensure!(resp.get("removed") == Some(expected.len().to_string().as_str()), "{name}: {resp}");
        canaries += after.len();
    }
    Ok(format!("5 flags and the ALL override exact; {canaries} surviving files checked"))
}

// ---------------------------------------------------------------------------

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "wire-protocol conformance", Duration::from_secs(10), wire_protocol),
        (2, "two-class swarm reproduction", Duration::from_secs(60), two_class_swarm),
        (3, "pipeline round-trip", Duration::from_secs(60), round_trip),
        (4, "request/piece correlation", Duration::from_secs(300), request_piece_correlation),
        (5, "storage compaction", Duration::from_secs(300), compaction),
        (6, "analysis oracles", Duration::from_secs(300), analysis_oracles),
        (7, "end-to-end scenario", Duration::from_secs(120), end_to_end),
        (8, "CLEANUP semantics matrix", Duration::from_secs(300), cleanup_matrix),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || f == &n.to_string()) {
            continue;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = t.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  criterion {n}: {name}: {detail} [{elapsed:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {n}: {name}: {why} [{elapsed:.2?}]");
            }
        }
    }
    std::io::stdout().flush().unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}
