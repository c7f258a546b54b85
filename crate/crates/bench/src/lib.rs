//! Fixtures shared by the benchmarks.

use swarmforge::sim::{simulate, Role, SimConfig, SimPeer, SimResult};
use swarmforge::VlogDialect;

/// One seeder and `leechers` peers split between the two bandwidth classes.
pub fn swarm(leechers: usize, file_size: u64) -> SimConfig {
    let addr = |i: usize| format!("10.0.{}.{}:6881", i / 200, i % 200 + 1);
    let mut origin = SimPeer::new("origin", &addr(0), Role::Seeder, 1 << 30, 8 << 20);
    origin.upload_slots = Some(leechers);
    let mut peers = vec![origin];
    for i in 1..=leechers {
        let (down, up) = if i % 2 == 1 { (524_288, 262_144) } else { (65_536, 32_768) };
        peers.push(SimPeer::new(&format!("l{i}"), &addr(i), Role::Leecher, down, up));
    }
    SimConfig::new(7, peers, file_size, 65_536, 16_384)
}

/// Verbose and status log text of peer 1 of a simulated swarm.
pub fn peer_logs(cfg: &SimConfig, dialect: VlogDialect) -> (SimResult, String, String) {
    let res = simulate(cfg).expect("valid swarm");
    let with_peer = dialect == VlogDialect::UnifiedFile;
    let vlog: String = res.records_for(cfg, 1).iter().map(|r| r.render(with_peer) + "\n").collect();
    let slog: String = res.status[1].iter().map(|r| r.to_string() + "\n").collect();
    (res, vlog, slog)
}
