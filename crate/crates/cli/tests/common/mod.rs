#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use swarmforge::adapters::AdapterRegistry;
use swarmforge::agent::{Agent, AgentConfig};
use swarmforge::sim::SimTorrent;
use swarmforge::{CommandEnvelope, CommandKind};

pub const SWARMFORGE: &str = env!("CARGO_BIN_EXE_swarmforge");
pub const BTSIM: &str = env!("CARGO_BIN_EXE_btsim");

/// A port nothing listened on a moment ago.
pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

pub fn write_torrent(dir: &Path, length: u64) -> PathBuf {
    let path = dir.join("content.json");
    let t = SimTorrent { name: "payload.bin".into(), length, piece_length: 65536, block_length: 16384 };
    t.save(&path).unwrap();
    path
}

/// Three local nodes, each offering both simulated dialects.
pub fn cluster_xml(ports: [u16; 3]) -> String {
    let mut xml = String::from("<nodes>\n");
    for (i, port) in ports.iter().enumerate() {
        xml.push_str(&format!(
            "  <node id=\"n{}\" host=\"127.0.0.1\" agent-port=\"{port}\" agent-path=\"{SWARMFORGE}\">\n\
             \x20   <client name=\"simulated\" path=\"{BTSIM}\"/>\n\
             \x20   <client name=\"simulated-per-peer\" path=\"{BTSIM}\"/>\n\
             \x20 </node>\n",
            i + 1
        ));
    }
    xml.push_str("</nodes>\n");
    xml
}

/// One seeder and four leechers in two bandwidth classes over three nodes.
pub fn swarm_xml(seed: u64, torrent: &Path) -> String {
    let peer = |id: &str, node: &str, client: &str, role: &str, rates: &str, extra: &str| {
        format!(
            "  <peer id=\"{id}\" node=\"{node}\" client=\"{client}\" role=\"{role}\" {rates} \
             ddir=\"{id}/down\" slog=\"{id}/status.log\" vlog=\"{id}/verbose.log\"{extra}/>\n"
        )
    };
    let mut xml = format!("<swarm id=\"local-3\" torrent=\"{}\" seed=\"{seed}\">\n", torrent.display());
    xml += &peer("origin", "n1", "simulated", "seeder", "up=\"2M\"", "");
    xml += &peer("fast-a", "n2", "simulated", "leecher", "down=\"256K\" up=\"128K\"", "");
    xml += &peer("fast-b", "n3", "simulated-per-peer", "leecher", "down=\"256K\" up=\"128K\"", "");
    xml += &peer("slow-a", "n2", "simulated", "leecher", "down=\"64K\" up=\"32K\"", " start=\"1\"");
    xml += &peer("slow-b", "n3", "simulated-per-peer", "leecher", "down=\"64K\" up=\"32K\"", " start=\"2\"");
    xml.push_str("</swarm>\n");
    xml
}

/// An in-process agent whose simulated clients are the `btsim` binary.
/// `simulated-per-peer` points at `per_peer_program` so callers can make
/// spawning fail.
pub fn btsim_agent(state_dir: &Path, per_peer_program: &str) -> Agent {
    let programs: BTreeMap<String, String> = [
        ("simulated".to_string(), BTSIM.to_string()),
        ("simulated-per-peer".to_string(), per_peer_program.to_string()),
    ]
    .into();
    let registry = AdapterRegistry::with_programs(&programs).unwrap();
    Agent::new(AgentConfig::new(state_dir, registry)).unwrap()
}

pub fn start_leecher(agent: &Agent, dir: &Path, torrent: &Path, client: &str, name: &str) -> u64 {
    let cmd = CommandEnvelope::new(CommandKind::StartClient)
        .arg("TORRENT", torrent.display().to_string())
        .arg("DOWN_DIR", dir.join(format!("down-{name}")).display().to_string())
        .arg("SLOG", dir.join(format!("logs/{name}.slog")).display().to_string())
        .arg("VLOG", dir.join(format!("logs/{name}.vlog")).display().to_string())
        .arg("CLIENT", client)
        .arg("ROLE", "leecher")
        .arg("DOWN", "524288")
        .arg("UP", "262144")
        .arg("X_TICK_MS", "2");
    let resp = agent.handle(&cmd);
    assert!(resp.is_ok(), "start {name}: {resp}");
    resp.get("id").unwrap().parse().unwrap()
}

/// Waits until session `id` has left RUNNING and returns its final state.
pub fn wait_exit(agent: &Agent, id: u64) -> String {
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        let resp = agent.handle(&CommandEnvelope::new(CommandKind::GetClients));
        let state = resp.get(&format!("state_{id}")).unwrap_or_default().to_string();
        if state != "RUNNING" {
            return state;
        }
        assert!(Instant::now() < deadline, "session {id} still running");
        thread::sleep(Duration::from_millis(20));
    }
}

/// Every regular file below `dir`.
pub fn files_under(dir: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path);
            }
        }
    }
    out
}
