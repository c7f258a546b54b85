//! Operator side: talks to agents, fans commands out over nodes and runs
//! whole scenarios.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::Serialize;
use thiserror::Error;

use crate::adapters::manifest_toml;
use crate::agent::{extract_archive, SessionState};
use crate::analysis::{plateau, speed_series, Flow};
use crate::config::{NodeSpec, PlacementSpec, SwarmSpec};
use crate::logs::{Eta, Timestamp};
use crate::sim::{default_start_time, Role, Roster, SimPeer, SimTorrent};
use crate::store::{ingest_log_files, ExperimentMeta, PeerMeta, Store, StoreError};
use crate::wire::{
    decode_response, encode_command, read_frame, write_frame, CommandEnvelope, CommandKind, ResponseEnvelope,
    StatusReport, WireError,
};

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(3);
/// Longer than the agent's stop grace period.
pub const IO_TIMEOUT: Duration = Duration::from_secs(15);

#[derive(Debug, Error)]
pub enum CommanderError {
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("protocol error: {0}")]
    Protocol(#[from] WireError),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("torrent {0} does not exist")]
    MissingTorrent(String),
    #[error("scenario did not finish within {0} s")]
    ScenarioTimeout(u64),
    #[error("bootstrap failed on {0}")]
    Bootstrap(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// One request/response exchange with an agent.
pub fn exchange(host: &str, port: u16, cmd: &CommandEnvelope) -> Result<ResponseEnvelope, CommanderError> {
    let refused = |e: io::Error| CommanderError::ConnectionRefused(format!("{host}:{port}: {e}"));
    let addr = (host, port)
        .to_socket_addrs()
        .map_err(refused)?
        .next()
        .ok_or_else(|| CommanderError::ConnectionRefused(format!("{host}:{port}: no address")))?;
    let mut stream = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT).map_err(refused)?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_write_timeout(Some(IO_TIMEOUT))?;
    write_frame(&mut stream, &encode_command(cmd)?)?;
    let frame = read_frame(&mut stream)?.ok_or(WireError::FrameTooShort)?;
    Ok(decode_response(&frame)?)
}

pub fn node_exchange(node: &NodeSpec, cmd: &CommandEnvelope) -> Result<ResponseEnvelope, CommanderError> {
    exchange(&node.host, node.agent_port, cmd)
}

/// Runs `f` for every node concurrently; results come back in input order.
pub fn fan_out<'a, T, F>(nodes: &[&'a NodeSpec], f: F) -> Vec<(&'a NodeSpec, T)>
where
    T: Send,
    F: Fn(&NodeSpec) -> T + Sync,
{
    thread::scope(|scope| {
        let handles: Vec<_> = nodes.iter().map(|&n| (n, scope.spawn(|| f(n)))).collect();
        handles.into_iter().map(|(n, h)| (n, h.join().expect("fan-out worker panicked"))).collect()
    })
}

/// Which nodes and sessions a command addresses.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TargetSelector {
    /// `None` is every node.
    pub node_ids: Option<BTreeSet<String>>,
    /// `None` is every session on the node.
    pub session_ids: Option<Vec<u64>>,
}

impl TargetSelector {
    pub fn all() -> Self {
        TargetSelector::default()
    }

    pub fn resolve<'a>(&self, inventory: &'a [NodeSpec]) -> Result<Vec<&'a NodeSpec>, CommanderError> {
        match &self.node_ids {
            None => Ok(inventory.iter().collect()),
            Some(ids) => {
                for id in ids {
                    if !inventory.iter().any(|n| &n.node_id == id) {
                        return Err(CommanderError::UnknownNode(id.clone()));
                    }
                }
                Ok(inventory.iter().filter(|n| ids.contains(&n.node_id)).collect())
            }
        }
    }
}

/// One output line: `node_id<TAB>key=value<TAB>...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportLine {
    pub node_id: String,
    pub ok: bool,
    pub pairs: Vec<(String, String)>,
}

impl ReportLine {
    fn from_response(node_id: &str, prefix: &[(&str, String)], resp: &ResponseEnvelope) -> Self {
        let mut pairs: Vec<(String, String)> = prefix.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        pairs.push(("result".into(), if resp.is_ok() { "OK".into() } else { "ERR".into() }));
        if let Some(code) = resp.error_code {
            pairs.push(("code".into(), code.token().into()));
        }
        pairs.extend(resp.body.iter().cloned());
        ReportLine { node_id: node_id.to_string(), ok: resp.is_ok(), pairs }
    }

    fn failure(node_id: &str, prefix: &[(&str, String)], err: &CommanderError) -> Self {
        let mut pairs: Vec<(String, String)> = prefix.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        pairs.push(("result".into(), "FAILED".into()));
        pairs.push(("error".into(), err.to_string()));
        ReportLine { node_id: node_id.to_string(), ok: false, pairs }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

impl fmt::Display for ReportLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&escape_field(&self.node_id))?;
        for (k, v) in &self.pairs {
            write!(f, "\t{k}={}", escape_field(v))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Report {
    pub lines: Vec<ReportLine>,
}

impl Report {
    pub fn all_ok(&self) -> bool {
        self.lines.iter().all(|l| l.ok)
    }

    pub fn exit_code(&self) -> i32 {
        if self.all_ok() {
            0
        } else {
            1
        }
    }

    pub fn lines_for<'a>(&'a self, node_id: &'a str) -> impl Iterator<Item = &'a ReportLine> + 'a {
        self.lines.iter().filter(move |l| l.node_id == node_id)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for line in &self.lines {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Session ids on a node: the selector's, or whatever the agent lists.
fn sessions_on(node: &NodeSpec, selector: &TargetSelector) -> Result<Vec<u64>, CommanderError> {
    if let Some(ids) = &selector.session_ids {
        return Ok(ids.clone());
    }
    let resp = node_exchange(node, &CommandEnvelope::new(CommandKind::GetClients))?;
    Ok(resp.get("clients").unwrap_or_default().split(',').filter_map(|s| s.parse().ok()).collect())
}

/// Sends one command per selected session on every selected node.
fn per_session(
    inventory: &[NodeSpec],
    selector: &TargetSelector,
    make: impl Fn(u64) -> CommandEnvelope + Sync,
) -> Result<Report, CommanderError> {
    let nodes = selector.resolve(inventory)?;
    let results = fan_out(&nodes, |node| {
        let ids = match sessions_on(node, selector) {
            Ok(ids) => ids,
            Err(e) => return vec![ReportLine::failure(&node.node_id, &[], &e)],
        };
        ids.into_iter()
            .map(|id| {
                let prefix = [("id", id.to_string())];
                match node_exchange(node, &make(id)) {
                    Ok(resp) => ReportLine::from_response(&node.node_id, &prefix, &resp),
                    Err(e) => ReportLine::failure(&node.node_id, &prefix, &e),
                }
            })
            .collect()
    });
    Ok(Report { lines: results.into_iter().flat_map(|(_, lines)| lines).collect() })
}

/// One command per selected node.
fn per_node(
    inventory: &[NodeSpec],
    selector: &TargetSelector,
    cmd: &CommandEnvelope,
) -> Result<Report, CommanderError> {
    let nodes = selector.resolve(inventory)?;
    let results = fan_out(&nodes, |node| match node_exchange(node, cmd) {
        Ok(resp) => ReportLine::from_response(&node.node_id, &[], &resp),
        Err(e) => ReportLine::failure(&node.node_id, &[], &e),
    });
    Ok(Report { lines: results.into_iter().map(|(_, l)| l).collect() })
}

pub fn cmd_stop(inventory: &[NodeSpec], selector: &TargetSelector) -> Result<Report, CommanderError> {
    per_session(inventory, selector, |id| CommandEnvelope::new(CommandKind::StopClient).arg("ID", id.to_string()))
}

pub fn cmd_status(inventory: &[NodeSpec], selector: &TargetSelector) -> Result<Report, CommanderError> {
    per_session(inventory, selector, |id| CommandEnvelope::new(CommandKind::GetStatus).arg("ID", id.to_string()))
}

pub fn cmd_getoutput(inventory: &[NodeSpec], selector: &TargetSelector) -> Result<Report, CommanderError> {
    per_session(inventory, selector, |id| CommandEnvelope::new(CommandKind::GetOutput).arg("ID", id.to_string()))
}

pub fn cmd_archive(inventory: &[NodeSpec], selector: &TargetSelector) -> Result<Report, CommanderError> {
    per_session(inventory, selector, |id| CommandEnvelope::new(CommandKind::Archive).arg("ID", id.to_string()))
}

pub fn cmd_getclients(inventory: &[NodeSpec], selector: &TargetSelector) -> Result<Report, CommanderError> {
    per_node(inventory, selector, &CommandEnvelope::new(CommandKind::GetClients))
}

/// `flags` holds CLEANUP keys (`ALL`, `DOWN`, ...) set to 1.
pub fn cmd_cleanup(inventory: &[NodeSpec], selector: &TargetSelector, flags: &[&str]) -> Result<Report, CommanderError> {
    let mut cmd = CommandEnvelope::new(CommandKind::Cleanup);
    for flag in flags {
        cmd = cmd.arg(flag, "1");
    }
    per_node(inventory, selector, &cmd)
}

/// Knobs for simulated clients and path resolution.
#[derive(Debug, Clone)]
pub struct LaunchOptions {
    /// Relative placement paths are taken relative to this directory.
    pub work_dir: PathBuf,
    /// Roster handed to simulated clients.
    pub roster: Option<PathBuf>,
    /// Wall-clock milliseconds per simulated second.
    pub tick_ms: u64,
}

fn resolve(work_dir: &Path, p: &str) -> String {
    let path = Path::new(p);
    if path.is_absolute() {
        p.to_string()
    } else {
        work_dir.join(path).display().to_string()
    }
}

fn is_simulated(client: &str) -> bool {
    client == "simulated" || client.starts_with("simulated-")
}

/// The START-CLIENT request for a placement.
pub fn start_command(swarm: &SwarmSpec, p: &PlacementSpec, opts: &LaunchOptions) -> CommandEnvelope {
    let mut cmd = CommandEnvelope::new(CommandKind::StartClient)
        .arg("TORRENT", resolve(&opts.work_dir, &swarm.torrent_path))
        .arg("DOWN_DIR", resolve(&opts.work_dir, &p.download_dir))
        .arg("SLOG", resolve(&opts.work_dir, &p.slog_path))
        .arg("VLOG", resolve(&opts.work_dir, &p.vlog_path))
        .arg("CLIENT", p.client.clone())
        .arg("ROLE", p.role.token());
    if let Some(d) = p.down_limit {
        cmd = cmd.arg("DOWN", d.to_string());
    }
    if let Some(u) = p.up_limit {
        cmd = cmd.arg("UP", u.to_string());
    }
    if is_simulated(&p.client) {
        cmd = cmd.arg("X_PEER_ID", p.peer_id.clone()).arg("X_TICK_MS", opts.tick_ms.to_string());
        if let Some(r) = &opts.roster {
            cmd = cmd.arg("X_ROSTER", r.display().to_string());
        }
    }
    cmd
}

/// Starts the swarm's placements that live on the selected nodes.
pub fn cmd_start(
    inventory: &[NodeSpec],
    swarm: &SwarmSpec,
    selector: &TargetSelector,
    opts: &LaunchOptions,
) -> Result<Report, CommanderError> {
    let nodes = selector.resolve(inventory)?;
    let results = fan_out(&nodes, |node| {
        swarm
            .placements
            .iter()
            .filter(|p| p.node_id == node.node_id)
            .map(|p| {
                let prefix = [("peer", p.peer_id.clone())];
                match node_exchange(node, &start_command(swarm, p, opts)) {
                    Ok(resp) => ReportLine::from_response(&node.node_id, &prefix, &resp),
                    Err(e) => ReportLine::failure(&node.node_id, &prefix, &e),
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(Report { lines: results.into_iter().flat_map(|(_, l)| l).collect() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BootstrapOutcome {
    Started,
    AlreadyRunning,
    Failed(String),
}

impl BootstrapOutcome {
    pub fn token(&self) -> &'static str {
        match self {
            BootstrapOutcome::Started => "started",
            BootstrapOutcome::AlreadyRunning => "already-running",
            BootstrapOutcome::Failed(_) => "failed",
        }
    }
}

/// How the commander brings an agent up on a node.
pub trait BootstrapTransport: Send + Sync {
    fn bootstrap(&self, node: &NodeSpec) -> BootstrapOutcome;
}

fn agent_reachable(node: &NodeSpec) -> bool {
    exchange(&node.host, node.agent_port, &CommandEnvelope::new(CommandKind::GetClients)).is_ok()
}

fn wait_reachable(node: &NodeSpec, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if agent_reachable(node) {
            return true;
        }
        thread::sleep(Duration::from_millis(50));
    }
    false
}

/// Spawns `agent_path agent ...` on this machine, one state directory per
/// node under `root`.
pub struct LocalExec {
    root: PathBuf,
    children: Mutex<Vec<(String, Child)>>,
    ready_timeout: Duration,
}

impl LocalExec {
    pub fn new(root: &Path) -> Self {
        LocalExec { root: root.to_path_buf(), children: Mutex::new(Vec::new()), ready_timeout: Duration::from_secs(10) }
    }

    pub fn state_dir(&self, node: &NodeSpec) -> PathBuf {
        self.root.join(&node.node_id)
    }

    /// Lets started agents outlive this value.
    pub fn detach(&self) {
        self.children.lock().unwrap_or_else(|p| p.into_inner()).clear();
    }

    /// Terminates the agents this transport started.
    pub fn shutdown(&self) {
        let mut children = std::mem::take(&mut *self.children.lock().unwrap_or_else(|p| p.into_inner()));
        for (node, child) in &mut children {
            info!("stopping agent on {node}");
            // SAFETY: signalling a child we spawned and have not reaped.
            unsafe {
                libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
            }
        }
        for (_, child) in &mut children {
            let deadline = Instant::now() + Duration::from_secs(10);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) | Err(_) => break,
                    Ok(None) if Instant::now() > deadline => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                    Ok(None) => thread::sleep(Duration::from_millis(20)),
                }
            }
        }
    }
}

impl BootstrapTransport for LocalExec {
    fn bootstrap(&self, node: &NodeSpec) -> BootstrapOutcome {
        if agent_reachable(node) {
            return BootstrapOutcome::AlreadyRunning;
        }
        let state = self.state_dir(node);
        let manifest = state.join("adapters.toml");
        let prepared = fs::create_dir_all(&state).and_then(|_| fs::write(&manifest, manifest_toml(&node.client_paths)));
        if let Err(e) = prepared {
            return BootstrapOutcome::Failed(format!("{}: {e}", state.display()));
        }
        let log = match fs::File::create(state.join("agent.log")) {
            Ok(f) => f,
            Err(e) => return BootstrapOutcome::Failed(e.to_string()),
        };
        let spawned = Command::new(&node.agent_path)
            .arg("agent")
            .args(["--bind", &node.host, "--port", &node.agent_port.to_string()])
            .arg("--state-dir")
            .arg(&state)
            .arg("--adapters")
            .arg(&manifest)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(log)
            .spawn();
        let mut child = match spawned {
            Ok(c) => c,
            Err(e) => return BootstrapOutcome::Failed(format!("{}: {e}", node.agent_path)),
        };
        if !wait_reachable(node, self.ready_timeout) {
            let _ = child.kill();
            let _ = child.wait();
            return BootstrapOutcome::Failed("agent did not come up".into());
        }
        self.children.lock().unwrap_or_else(|p| p.into_inner()).push((node.node_id.clone(), child));
        BootstrapOutcome::Started
    }
}

impl Drop for LocalExec {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Runs an operator-supplied command, e.g. an ssh invocation. Placeholders
/// `{host}`, `{agent_port}`, `{ssh_port}`, `{user}`, `{agent_path}` and
/// `{node}` are substituted in each whitespace-separated word.
pub struct ExternalCommand {
    template: Vec<String>,
    ready_timeout: Duration,
}

impl ExternalCommand {
    pub fn new(template: &str) -> Self {
        ExternalCommand {
            template: template.split_whitespace().map(str::to_string).collect(),
            ready_timeout: Duration::from_secs(10),
        }
    }

    pub fn argv(&self, node: &NodeSpec) -> Vec<String> {
        self.template
            .iter()
            .map(|w| {
                w.replace("{host}", &node.host)
                    .replace("{agent_port}", &node.agent_port.to_string())
                    .replace("{ssh_port}", &node.ssh_port.to_string())
                    .replace("{user}", &node.username)
                    .replace("{agent_path}", &node.agent_path)
                    .replace("{node}", &node.node_id)
            })
            .collect()
    }
}

impl BootstrapTransport for ExternalCommand {
    fn bootstrap(&self, node: &NodeSpec) -> BootstrapOutcome {
        if agent_reachable(node) {
            return BootstrapOutcome::AlreadyRunning;
        }
        let argv = self.argv(node);
        let Some(program) = argv.first() else {
            return BootstrapOutcome::Failed("empty bootstrap command".into());
        };
        match Command::new(program).args(&argv[1..]).stdin(Stdio::null()).output() {
            Ok(out) if out.status.success() => {
                if wait_reachable(node, self.ready_timeout) {
                    BootstrapOutcome::Started
                } else {
                    BootstrapOutcome::Failed("agent did not come up".into())
                }
            }
            Ok(out) => BootstrapOutcome::Failed(format!(
                "{program} exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )),
            Err(e) => BootstrapOutcome::Failed(format!("{program}: {e}")),
        }
    }
}

pub fn cmd_bootstrap(
    inventory: &[NodeSpec],
    selector: &TargetSelector,
    transport: &dyn BootstrapTransport,
) -> Result<Report, CommanderError> {
    let nodes = selector.resolve(inventory)?;
    let results = fan_out(&nodes, |node| transport.bootstrap(node));
    Ok(Report {
        lines: results
            .into_iter()
            .map(|(node, outcome)| {
                let failed = matches!(outcome, BootstrapOutcome::Failed(_));
                let mut pairs = vec![
                    ("result".to_string(), if failed { "FAILED" } else { "OK" }.to_string()),
                    ("bootstrap".to_string(), outcome.token().to_string()),
                ];
                if let BootstrapOutcome::Failed(why) = &outcome {
                    pairs.push(("error".into(), why.clone()));
                }
                ReportLine { node_id: node.node_id.clone(), ok: !matches!(outcome, BootstrapOutcome::Failed(_)), pairs }
            })
            .collect(),
    })
}

/// Copies a file an agent produced to the commander's machine.
pub trait LogFetcher: Send + Sync {
    fn fetch(&self, node: &NodeSpec, remote: &Path, local: &Path) -> io::Result<()>;
}

/// Agent files are visible at the same path locally (NFS or one machine).
pub struct SharedFs;

impl LogFetcher for SharedFs {
    fn fetch(&self, _node: &NodeSpec, remote: &Path, local: &Path) -> io::Result<()> {
        fs::copy(remote, local).map(|_| ())
    }
}

/// Scenario knobs.
pub struct ScenarioOptions {
    pub work_dir: PathBuf,
    /// Wall-clock milliseconds per scenario second; also the poll interval.
    pub tick_ms: u64,
    /// Ticks to wait after the last leecher completes before stopping
    /// everything.
    pub grace_ticks: u32,
    /// `None` uses ten times `file_size / slowest cap`.
    pub timeout_ticks: Option<u64>,
}

impl ScenarioOptions {
    pub fn new(work_dir: &Path) -> Self {
        ScenarioOptions { work_dir: work_dir.to_path_buf(), tick_ms: 1000, grace_ticks: 2, timeout_ticks: None }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PlacementSummary {
    pub peer_id: String,
    pub node_id: String,
    pub role: String,
    pub down_limit: Option<u64>,
    pub session: Option<u64>,
    pub completed: bool,
    /// Seconds from the peer's first status sample to completion.
    pub completion_time: Option<i64>,
    pub plateau_mean: Option<f64>,
    pub archive: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ClassSummary {
    pub down_limit: Option<u64>,
    pub leechers: usize,
    pub mean_plateau: Option<f64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ScenarioSummary {
    pub swarm_id: String,
    pub store: String,
    pub ticks: u64,
    pub placements: Vec<PlacementSummary>,
    pub classes: Vec<ClassSummary>,
}

/// Synthetic address of the i-th placement inside the simulated swarm.
pub fn sim_addr(i: usize) -> String {
    format!("10.{}.{}.{}:6881", i / 40_000, (i / 200) % 200, i % 200 + 1)
}

/// Upper bound on a cap when the config says unlimited.
const UNLIMITED_RATE: u64 = 1 << 30;

/// The roster simulated clients share, one peer per placement.
pub fn roster_for(swarm: &SwarmSpec) -> Roster {
    let peers = swarm
        .placements
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut peer = SimPeer::new(
                &p.peer_id,
                &sim_addr(i),
                p.role,
                p.down_limit.unwrap_or(UNLIMITED_RATE),
                p.up_limit.unwrap_or(UNLIMITED_RATE),
            );
            peer.start_tick = p.start_offset;
            peer.stop_tick = p.stop_offset;
            peer.upload_slots = p.upload_slots;
            peer
        })
        .collect();
    Roster::new(swarm.seed, peers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Pending,
    Running,
    Finished,
}

struct Tracked<'a> {
    placement: &'a PlacementSpec,
    node: &'a NodeSpec,
    phase: Phase,
    session: Option<u64>,
    completed: bool,
    stop_at: Option<u64>,
    error: Option<String>,
}

/// Stopped, exited or failed sessions per node, from GET-CLIENTS.
fn finished_sessions(node: &NodeSpec) -> Result<BTreeSet<u64>, CommanderError> {
    let resp = node_exchange(node, &CommandEnvelope::new(CommandKind::GetClients))?;
    Ok(resp
        .body
        .iter()
        .filter_map(|(k, v)| {
            let id = k.strip_prefix("state_")?.parse().ok()?;
            (SessionState::from_token(v)? != SessionState::Running).then_some(id)
        })
        .collect())
}

/// Host facts recorded with every peer run on this machine.
#[derive(Debug, Clone)]
pub struct HostInfo {
    pub cpu: String,
    pub ram_bytes: Option<u64>,
    pub os: String,
}

impl HostInfo {
    pub fn probe() -> Self {
        let cpuinfo = fs::read_to_string("/proc/cpuinfo").unwrap_or_default();
        let cpu = cpuinfo
            .lines()
            .find_map(|l| l.strip_prefix("model name").and_then(|r| r.split_once(':')).map(|(_, v)| v.trim().to_string()))
            .unwrap_or_else(|| std::env::consts::ARCH.to_string());
        let ram_bytes = fs::read_to_string("/proc/meminfo").ok().and_then(|m| {
            m.lines()
                .find_map(|l| l.strip_prefix("MemTotal:"))
                .and_then(|v| v.trim().trim_end_matches("kB").trim().parse::<u64>().ok())
                .map(|kb| kb * 1024)
        });
        let release = fs::read_to_string("/proc/sys/kernel/osrelease").unwrap_or_default();
        let os = format!("{} {}", std::env::consts::OS, release.trim()).trim().to_string();
        HostInfo { cpu, ram_bytes, os }
    }
}

/// Bootstraps agents, runs the swarm, collects and ingests the logs and
/// writes `summary.json` next to `experiment.db` in the work dir.
pub fn run_scenario(
    inventory: &[NodeSpec],
    swarm: &SwarmSpec,
    transport: &dyn BootstrapTransport,
    fetcher: &dyn LogFetcher,
    opts: &ScenarioOptions,
) -> Result<ScenarioSummary, CommanderError> {
    let work = &opts.work_dir;
    let torrent_path = PathBuf::from(resolve(work, &swarm.torrent_path));
    if !torrent_path.is_file() {
        return Err(CommanderError::MissingTorrent(torrent_path.display().to_string()));
    }
    fs::create_dir_all(work)?;
    let work = &fs::canonicalize(work)?;
    let node_of = |id: &str| inventory.iter().find(|n| n.node_id == id).ok_or_else(|| CommanderError::UnknownNode(id.into()));

    let used: BTreeSet<&str> = swarm.placements.iter().map(|p| p.node_id.as_str()).collect();
    let selector = TargetSelector { node_ids: Some(used.iter().map(|s| s.to_string()).collect()), session_ids: None };
    let boot = cmd_bootstrap(inventory, &selector, transport)?;
    for line in &boot.lines {
        info!("bootstrap {line}");
    }
    if let Some(bad) = boot.lines.iter().find(|l| !l.ok) {
        return Err(CommanderError::Bootstrap(bad.to_string()));
    }

    let roster = roster_for(swarm);
    let roster_path = work.join("roster.json");
    roster.save(&roster_path)?;
    let launch = LaunchOptions { work_dir: work.clone(), roster: Some(roster_path), tick_ms: opts.tick_ms };

    let sim_torrent = SimTorrent::load(&torrent_path).ok();
    let timeout = opts.timeout_ticks.unwrap_or_else(|| {
        let size = sim_torrent.as_ref().map_or(1 << 30, |t| t.length);
        let slowest = swarm.placements.iter().filter_map(|p| p.down_limit).min().unwrap_or(1 << 20);
        let last_start = swarm.placements.iter().map(|p| u64::from(p.start_offset)).max().unwrap_or(0);
        10 * size.div_ceil(slowest) + last_start
    });

    let mut tracked: Vec<Tracked> = swarm
        .placements
        .iter()
        .map(|p| {
            Ok(Tracked {
                placement: p,
                node: node_of(&p.node_id)?,
                phase: Phase::Pending,
                session: None,
                completed: false,
                stop_at: p.stop_offset.map(u64::from),
                error: None,
            })
        })
        .collect::<Result<_, CommanderError>>()?;

    let tick = Duration::from_millis(opts.tick_ms.max(1));
    let begin = Instant::now();
    let mut now_tick: u64 = 0;
    let mut all_done_at: Option<u64> = None;
    let mut timed_out = false;
    loop {
        // Starts due this tick.
        for t in tracked.iter_mut().filter(|t| t.phase == Phase::Pending) {
            if u64::from(t.placement.start_offset) <= now_tick {
                match node_exchange(t.node, &start_command(swarm, t.placement, &launch)) {
                    Ok(resp) if resp.is_ok() => {
                        t.session = resp.get("id").and_then(|v| v.parse().ok());
                        t.phase = Phase::Running;
                        info!("{} started as session {:?} on {}", t.placement.peer_id, t.session, t.node.node_id);
                    }
                    Ok(resp) => {
                        t.error = Some(resp.to_string());
                        t.phase = Phase::Finished;
                    }
                    Err(e) => {
                        t.error = Some(e.to_string());
                        t.phase = Phase::Finished;
                    }
                }
            }
        }

        // Poll.
        let nodes: Vec<&NodeSpec> = inventory.iter().filter(|n| used.contains(n.node_id.as_str())).collect();
        let finished: BTreeMap<String, BTreeSet<u64>> = fan_out(&nodes, finished_sessions)
            .into_iter()
            .filter_map(|(n, r)| r.ok().map(|s| (n.node_id.clone(), s)))
            .collect();
        for t in tracked.iter_mut().filter(|t| t.phase == Phase::Running) {
            let id = t.session.expect("running sessions have ids");
            if finished.get(&t.node.node_id).is_some_and(|s| s.contains(&id)) {
                t.phase = Phase::Finished;
            }
            if t.placement.role == Role::Leecher && !t.completed {
                let cmd = CommandEnvelope::new(CommandKind::GetStatus).arg("ID", id.to_string());
                if let Ok(report) = node_exchange(t.node, &cmd).and_then(|r| Ok(StatusReport::from_response(&r)?)) {
                    t.completed = report.eta == Eta::Seconds(0);
                }
            }
            if t.phase == Phase::Running && t.stop_at.is_some_and(|s| s <= now_tick) {
                let _ = node_exchange(t.node, &CommandEnvelope::new(CommandKind::StopClient).arg("ID", id.to_string()));
                t.phase = Phase::Finished;
            }
        }

        let leechers_done = tracked
            .iter()
            .filter(|t| t.placement.role == Role::Leecher)
            .all(|t| t.completed || t.phase == Phase::Finished);
        let all_started = tracked.iter().all(|t| t.phase != Phase::Pending);
        if all_started && leechers_done {
            let at = *all_done_at.get_or_insert(now_tick);
            let everyone_gone = tracked.iter().all(|t| t.phase == Phase::Finished);
            if everyone_gone || now_tick >= at + u64::from(opts.grace_ticks) {
                break;
            }
        }
        if now_tick >= timeout {
            timed_out = true;
            break;
        }
        now_tick += 1;
        let next = begin + tick * now_tick as u32;
        if let Some(wait) = next.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
    }

    // Stop whatever is left.
    for t in &tracked {
        if let Some(id) = t.session {
            let _ = node_exchange(t.node, &CommandEnvelope::new(CommandKind::StopClient).arg("ID", id.to_string()));
        }
    }
    if timed_out {
        warn!("scenario timed out after {now_tick} ticks");
    }

    let summary = collect_and_ingest(swarm, &mut tracked, fetcher, work, sim_torrent.as_ref(), now_tick)?;
    fs::write(work.join("summary.json"), serde_json::to_string_pretty(&summary).expect("serializable"))?;
    if timed_out {
        return Err(CommanderError::ScenarioTimeout(now_tick));
    }
    Ok(summary)
}

fn collect_and_ingest(
    swarm: &SwarmSpec,
    tracked: &mut [Tracked],
    fetcher: &dyn LogFetcher,
    work: &Path,
    torrent: Option<&SimTorrent>,
    ticks: u64,
) -> Result<ScenarioSummary, CommanderError> {
    let collected = work.join("collected");
    let archives = work.join("archives");
    for dir in [&collected, &archives] {
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
    }
    let db = work.join("experiment.db");
    if db.exists() {
        fs::remove_file(&db)?;
    }
    let mut store = Store::open(&db)?;
    let exp = store.add_experiment(&ExperimentMeta {
        swarm_id: swarm.swarm_id.clone(),
        num_peers: swarm.placements.len() as u32,
        num_seeders: swarm.num_seeders() as u32,
        start_time: if torrent.is_some() { default_start_time() } else { Timestamp(chrono::Utc::now().timestamp()) },
        file_name: torrent.map_or_else(
            || Path::new(&swarm.torrent_path).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            |t| t.name.clone(),
        ),
        file_size: torrent.map_or(0, |t| t.length),
    })?;
    let host = HostInfo::probe();

    let mut placements = Vec::new();
    for (i, t) in tracked.iter_mut().enumerate() {
        let p = t.placement;
        let mut summary = PlacementSummary {
            peer_id: p.peer_id.clone(),
            node_id: p.node_id.clone(),
            role: p.role.token().to_string(),
            down_limit: p.down_limit,
            session: t.session,
            completed: t.completed,
            completion_time: None,
            plateau_mean: None,
            archive: None,
            error: t.error.clone(),
        };
        let peer = store.add_peer(&PeerMeta {
            experiment_id: exp,
            name: p.peer_id.clone(),
            client_name: p.client.clone(),
            addr: if is_simulated(&p.client) { sim_addr(i) } else { format!("{}:6881", t.node.host) },
            down_limit: p.down_limit,
            up_limit: p.up_limit,
            cpu_description: host.cpu.clone(),
            ram_bytes: host.ram_bytes,
            os_version: host.os.clone(),
            net_info: format!("node {}", p.node_id),
        })?;
        if let Some(id) = t.session {
            match fetch_session_logs(t.node, id, &p.peer_id, &p.slog_path, fetcher, &archives, &collected) {
                Ok((archive, slog, vlogs)) => {
                    summary.archive = Some(archive.display().to_string());
                    ingest_log_files(&mut store, peer, slog.as_deref(), &vlogs)?;
                }
                Err(e) => summary.error = Some(e.to_string()),
            }
        }
        // Seeders start complete; completion only means something for leechers.
        if let (Role::Leecher, Ok(series)) = (p.role, speed_series(&store, peer, Flow::Down, None)) {
            summary.completion_time = series.completed_at;
            summary.completed |= series.completed_at.is_some();
            if let Some(cap) = p.down_limit {
                let phase = series.transfer_phase();
                if let Ok(Some(pl)) = plateau(&phase, cap) {
                    summary.plateau_mean = Some(pl.mean);
                }
            }
        }
        placements.push(summary);
    }

    let mut classes: BTreeMap<Option<u64>, Vec<Option<f64>>> = BTreeMap::new();
    for s in placements.iter().filter(|s| s.role == Role::Leecher.token()) {
        classes.entry(s.down_limit).or_default().push(s.plateau_mean);
    }
    let classes = classes
        .into_iter()
        .map(|(down_limit, means)| {
            let known: Vec<f64> = means.iter().flatten().copied().collect();
            ClassSummary {
                down_limit,
                leechers: means.len(),
                mean_plateau: (!known.is_empty()).then(|| known.iter().sum::<f64>() / known.len() as f64),
            }
        })
        .collect();
    Ok(ScenarioSummary { swarm_id: swarm.swarm_id.clone(), store: db.display().to_string(), ticks, placements, classes })
}

type Fetched = (PathBuf, Option<PathBuf>, Vec<PathBuf>);

/// ARCHIVEs a finished session, copies the archive here and unpacks it.
fn fetch_session_logs(
    node: &NodeSpec,
    id: u64,
    peer_id: &str,
    slog: &str,
    fetcher: &dyn LogFetcher,
    archives: &Path,
    collected: &Path,
) -> Result<Fetched, CommanderError> {
    let cmd = CommandEnvelope::new(CommandKind::Archive).arg("ID", id.to_string()).arg("NAME", peer_id);
    let resp = node_exchange(node, &cmd)?;
    if !resp.is_ok() {
        return Err(CommanderError::Io(io::Error::other(format!("ARCHIVE {id} on {}: {resp}", node.node_id))));
    }
    let remote = PathBuf::from(resp.get("path").unwrap_or_default());
    let local = archives.join(format!("{peer_id}.tar.gz"));
    fetcher.fetch(node, &remote, &local)?;
    let dest = collected.join(peer_id);
    extract_archive(&local, &dest)?;
    let slog_name = Path::new(slog).file_name().map(|n| n.to_os_string());
    let mut status = None;
    let mut vlogs = Vec::new();
    for entry in resp.get("files").unwrap_or_default().split('\t').filter(|e| !e.is_empty()) {
        let path = dest.join(entry);
        if status.is_none() && path.file_name().map(|n| n.to_os_string()) == slog_name {
            status = Some(path);
        } else {
            vlogs.push(path);
        }
    }
    vlogs.sort();
    Ok((local, status, vlogs))
}
