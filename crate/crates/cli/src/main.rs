use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use swarmforge::adapters::AdapterRegistry;
use swarmforge::agent::{write_pid_file, Agent, AgentConfig};
use swarmforge::analysis::{
    acceleration_series, compare, export_plot, message_stats, plateau, speed_series, Flow, PlotData, PlotFormat,
};
use swarmforge::commander::{
    cmd_archive, cmd_bootstrap, cmd_cleanup, cmd_getclients, cmd_getoutput, cmd_start, cmd_status, cmd_stop,
    roster_for, run_scenario, BootstrapTransport, ExternalCommand, LaunchOptions, LocalExec, Report, ScenarioOptions, SharedFs,
    TargetSelector,
};
use swarmforge::config::{load_nodes, load_swarm, NodeSpec, SwarmSpec};
use swarmforge::logs::{read_last_status, StatusReader};
use swarmforge::store::{ingest_log_files, ExperimentMeta, PeerMeta, Store, Window};
use swarmforge::Timestamp;

#[derive(Parser)]
#[command(name = "swarmforge", version, about = "BitTorrent swarm experiments: agents, commander, log store and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Top,
}

#[derive(Subcommand)]
enum Top {
    /// Run the per-node agent daemon.
    Agent(AgentArgs),
    /// Drive agents described by a node inventory.
    Commander(CommanderArgs),
    /// Ingest status and verbose logs into a store.
    Parse(ParseArgs),
    /// Compute series and statistics from a store.
    Analyze {
        #[command(subcommand)]
        mode: AnalyzeMode,
    },
    /// Print every row of a store in a stable text form.
    Dump {
        #[arg(long)]
        db: PathBuf,
    },
}

#[derive(Args)]
struct AgentArgs {
    #[arg(long, default_value = "0.0.0.0")]
    bind: String,
    #[arg(long, default_value_t = swarmforge::config::DEFAULT_AGENT_PORT)]
    port: u16,
    #[arg(long)]
    state_dir: PathBuf,
    /// TOML manifest mapping client names to executables.
    #[arg(long)]
    adapters: Option<PathBuf>,
}

#[derive(Args)]
struct CommanderArgs {
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long)]
    swarm: Option<PathBuf>,
    /// Comma-separated node ids; default is every node.
    #[arg(long, global = true, value_delimiter = ',')]
    nodes_filter: Vec<String>,
    /// Comma-separated session ids; default is every session.
    #[arg(long, global = true, value_delimiter = ',')]
    ids: Vec<u64>,
    /// Directory for rosters, collected logs, the store and the summary.
    #[arg(long, global = true, default_value = ".")]
    work_dir: PathBuf,
    /// Wall-clock milliseconds per scenario second.
    #[arg(long, global = true, default_value_t = 1000)]
    tick_ms: u64,
    /// Bootstrap through this command instead of spawning agents locally.
    /// Placeholders: {host} {agent_port} {ssh_port} {user} {agent_path} {node}.
    #[arg(long, global = true)]
    bootstrap_cmd: Option<String>,
    /// Parent of the local agents' state directories (default: <work-dir>/agents).
    #[arg(long, global = true)]
    state_root: Option<PathBuf>,
    #[command(subcommand)]
    action: Action,
}

#[derive(Subcommand)]
enum Action {
    /// Start an agent on every selected node.
    Bootstrap,
    /// Start the swarm's clients on their nodes.
    Start,
    /// Stop sessions.
    Stop,
    /// Report the latest status sample of each session.
    Status,
    /// List sessions and their states.
    Getclients,
    /// Print the tail of each session's console output.
    Getoutput,
    /// Pack finished sessions' logs into tarballs on the node.
    Archive,
    /// Delete session files on the node.
    Cleanup {
        #[arg(long)]
        all: bool,
        #[arg(long)]
        down: bool,
        #[arg(long)]
        vlogs: bool,
        #[arg(long)]
        slogs: bool,
        #[arg(long)]
        archive: bool,
    },
    /// Run the whole swarm and ingest its logs.
    Run {
        /// Give up after this many scenario seconds.
        #[arg(long)]
        timeout: Option<u64>,
        /// Leave agents started by this run up afterwards.
        #[arg(long)]
        keep_agents: bool,
    },
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    slog: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    vlog: Vec<PathBuf>,
    #[arg(long)]
    db: PathBuf,
    /// Peer name (default: the status or verbose log's file stem).
    #[arg(long)]
    peer: Option<String>,
    /// Add the peer to this experiment instead of a new one.
    #[arg(long)]
    experiment: Option<i64>,
    #[arg(long, default_value = "imported")]
    swarm_id: String,
    #[arg(long, default_value = "unknown")]
    client: String,
}

#[derive(Subcommand)]
enum AnalyzeMode {
    /// One peer: speed, acceleration and message statistics.
    Peer {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        peer: String,
        /// `a:b`, seconds from the experiment start.
        #[arg(long)]
        window: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Download cap for bootstrap detection (default: the stored limit).
        #[arg(long)]
        cap: Option<u64>,
    },
    /// Two peers side by side.
    Compare {
        #[arg(long)]
        db: PathBuf,
        /// `P,Q`
        #[arg(long, value_delimiter = ',', required = true)]
        peers: Vec<String>,
        #[arg(long)]
        window: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

static TERMINATE: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_: libc::c_int) {
    TERMINATE.store(true, Ordering::SeqCst);
}

fn run_agent(args: AgentArgs) -> Result<i32> {
    let registry = match &args.adapters {
        Some(path) => AdapterRegistry::from_manifest(path)?,
        None => AdapterRegistry::new(),
    };
    info!("clients: {}", registry.names().collect::<Vec<_>>().join(", "));
    let agent = Agent::new(AgentConfig::new(&args.state_dir, registry))
        .with_context(|| format!("state dir {}", args.state_dir.display()))?;
    let running = agent.bind(&args.bind, args.port).with_context(|| format!("bind {}:{}", args.bind, args.port))?;
    write_pid_file(&args.state_dir)?;
    // SAFETY: the handler only stores to an atomic.
    unsafe {
        libc::signal(libc::SIGTERM, on_signal as *const () as libc::sighandler_t);
        libc::signal(libc::SIGINT, on_signal as *const () as libc::sighandler_t);
    }
    while !TERMINATE.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    info!("shutting down");
    running.shutdown();
    let _ = fs::remove_file(args.state_dir.join("agent.pid"));
    Ok(0)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_configs(args: &CommanderArgs) -> Result<(Vec<NodeSpec>, Option<SwarmSpec>)> {
    let nodes = load_nodes(&read(&args.nodes)?).with_context(|| args.nodes.display().to_string())?;
    let swarm = match &args.swarm {
        Some(p) => {
            let mut swarm = load_swarm(&read(p)?, &nodes).with_context(|| p.display().to_string())?;
            // A relative torrent path is relative to the swarm file.
            let torrent = Path::new(&swarm.torrent_path);
            if torrent.is_relative() {
                let base = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
                swarm.torrent_path = std::path::absolute(base.join(torrent))?.display().to_string();
            }
            Some(swarm)
        }
        None => None,
    };
    Ok((nodes, swarm))
}

fn print_report(report: &Report) -> Result<i32> {
    let mut out = io::stdout().lock();
    write!(out, "{report}")?;
    Ok(report.exit_code())
}

fn state_root(args: &CommanderArgs) -> PathBuf {
    args.state_root.clone().unwrap_or_else(|| args.work_dir.join("agents"))
}

fn run_commander(args: CommanderArgs) -> Result<i32> {
    let (nodes, swarm) = load_configs(&args)?;
    let selector = TargetSelector {
        node_ids: (!args.nodes_filter.is_empty()).then(|| args.nodes_filter.iter().cloned().collect::<BTreeSet<_>>()),
        session_ids: (!args.ids.is_empty()).then(|| args.ids.clone()),
    };
    let need_swarm = || swarm.as_ref().context("this command needs --swarm");
    let report = match &args.action {
        Action::Bootstrap => match &args.bootstrap_cmd {
            Some(template) => cmd_bootstrap(&nodes, &selector, &ExternalCommand::new(template))?,
            None => {
                let local = LocalExec::new(&state_root(&args));
                let report = cmd_bootstrap(&nodes, &selector, &local)?;
                // Agents started here outlive the commander.
                local.detach();
                report
            }
        },
        Action::Start => {
            let swarm = need_swarm()?;
            fs::create_dir_all(&args.work_dir)?;
            let work_dir = fs::canonicalize(&args.work_dir)?;
            // Simulated clients compute the swarm from a shared roster.
            let roster = work_dir.join("roster.json");
            roster_for(swarm).save(&roster)?;
            let opts = LaunchOptions { work_dir, roster: Some(roster), tick_ms: args.tick_ms };
            cmd_start(&nodes, swarm, &selector, &opts)?
        }
        Action::Stop => cmd_stop(&nodes, &selector)?,
        Action::Status => cmd_status(&nodes, &selector)?,
        Action::Getclients => cmd_getclients(&nodes, &selector)?,
        Action::Getoutput => cmd_getoutput(&nodes, &selector)?,
        Action::Archive => cmd_archive(&nodes, &selector)?,
        Action::Cleanup { all, down, vlogs, slogs, archive } => {
            let flags: Vec<&str> = [(*all, "ALL"), (*down, "DOWN"), (*vlogs, "VLOGS"), (*slogs, "SLOGS"), (*archive, "ARCHIVE")]
                .into_iter()
                .filter_map(|(on, name)| on.then_some(name))
                .collect();
            if flags.is_empty() {
                bail!("cleanup needs at least one of --all --down --vlogs --slogs --archive");
            }
            cmd_cleanup(&nodes, &selector, &flags)?
        }
        Action::Run { timeout, keep_agents } => {
            let swarm = need_swarm()?;
            let mut opts = ScenarioOptions::new(&args.work_dir);
            opts.tick_ms = args.tick_ms;
            opts.timeout_ticks = *timeout;
            let root = state_root(&args);
            let local;
            let external;
            let t: &dyn BootstrapTransport = match &args.bootstrap_cmd {
                Some(template) => {
                    external = ExternalCommand::new(template);
                    &external
                }
                None => {
                    local = LocalExec::new(&root);
                    if *keep_agents {
                        let summary = run_scenario(&nodes, swarm, &local, &SharedFs, &opts);
                        local.detach();
                        return print_summary(summary?);
                    }
                    &local
                }
            };
            return print_summary(run_scenario(&nodes, swarm, t, &SharedFs, &opts)?);
        }
    };
    print_report(&report)
}

fn print_summary(summary: swarmforge::commander::ScenarioSummary) -> Result<i32> {
    let mut out = io::stdout().lock();
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    let mut failed = false;
    for p in &summary.placements {
        failed |= p.error.is_some();
        writeln!(
            out,
            "{}\tpeer={}\trole={}\tsession={}\tcompleted={}\tcompletion_time={}\tplateau={}{}",
            p.node_id,
            p.peer_id,
            p.role,
            opt(p.session.map(|s| s.to_string())),
            p.completed,
            opt(p.completion_time.map(|t| t.to_string())),
            opt(p.plateau_mean.map(|m| format!("{m:.0}"))),
            p.error.as_ref().map(|e| format!("\terror={e}")).unwrap_or_default()
        )?;
    }
    for c in &summary.classes {
        writeln!(
            out,
            "class\tdown_limit={}\tleechers={}\tmean_plateau={}",
            opt(c.down_limit.map(|d| d.to_string())),
            c.leechers,
            opt(c.mean_plateau.map(|m| format!("{m:.0}")))
        )?;
    }
    writeln!(out, "store\t{}", summary.store)?;
    Ok(if failed { 1 } else { 0 })
}

fn file_stem(p: &Path) -> String {
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

fn run_parse(args: ParseArgs) -> Result<i32> {
    if args.slog.is_none() && args.vlog.is_empty() {
        bail!("nothing to parse: give --slog and/or --vlog");
    }
    let name = match (&args.peer, &args.slog, args.vlog.first()) {
        (Some(p), _, _) => p.clone(),
        (None, Some(s), _) => file_stem(s),
        (None, None, Some(v)) => file_stem(v),
        (None, None, None) => unreachable!(),
    };
    let mut store = Store::open(&args.db)?;
    let experiment = match args.experiment {
        Some(id) => {
            store.experiment(id)?;
            id
        }
        None => {
            let (first, last) = match &args.slog {
                Some(s) => {
                    let file = io::BufReader::new(fs::File::open(s).with_context(|| s.display().to_string())?);
                    (StatusReader::new(file).next().transpose()?, read_last_status(s)?)
                }
                None => (None, None),
            };
            store.add_experiment(&ExperimentMeta {
                swarm_id: args.swarm_id.clone(),
                num_peers: 1,
                num_seeders: 0,
                start_time: first.map_or(Timestamp(0), |r| r.timestamp),
                file_name: last.as_ref().map(|r| r.file_name.clone()).unwrap_or_default(),
                file_size: last.as_ref().map_or(0, |r| r.transfer_size),
            })?
        }
    };
    let peer = store.add_peer(&PeerMeta {
        experiment_id: experiment,
        name: name.clone(),
        client_name: args.client.clone(),
        ..Default::default()
    })?;
    let counts = ingest_log_files(&mut store, peer, args.slog.as_deref(), &args.vlog)?;
    println!(
        "{name}\texperiment={experiment}\tpeer={peer}\tstatus={}\tverbose={}\tskipped={}\traw_bytes={}",
        counts.status, counts.verbose, counts.skipped, counts.raw_bytes
    );
    Ok(0)
}

fn find_peer(store: &Store, name: &str) -> Result<i64> {
    if let Some(id) = store.find_peer(None, name)? {
        return Ok(id);
    }
    if let Ok(id) = name.parse::<i64>() {
        if store.peer(id).is_ok() {
            return Ok(id);
        }
    }
    bail!("no peer named `{name}`")
}

fn parse_window(store: &Store, peer: i64, text: Option<&str>) -> Result<Option<Window>> {
    let Some(text) = text else { return Ok(None) };
    let (a, b) = text.split_once(':').context("window must be `a:b`")?;
    let start = store.experiment(store.peer(peer)?.experiment_id)?.start_time;
    let a: i64 = a.trim().parse().context("window start")?;
    let b: i64 = b.trim().parse().context("window end")?;
    Ok(Some(Window::new(start.offset(a), start.offset(b))))
}

fn export_both(data: &dyn PlotData, out: &Path, stem: &str) -> Result<()> {
    for format in [PlotFormat::Csv, PlotFormat::Svg] {
        let path = out.join(format!("{stem}.{}", format.extension()));
        export_plot(data, format, &path)?;
        println!("wrote\t{}", path.display());
    }
    Ok(())
}

fn run_analyze(mode: AnalyzeMode) -> Result<i32> {
    match mode {
        AnalyzeMode::Peer { db, peer, window, out, cap } => {
            let store = Store::open_read_only(&db)?;
            let id = find_peer(&store, &peer)?;
            let window = parse_window(&store, id, window.as_deref())?;
            fs::create_dir_all(&out)?;
            for flow in [Flow::Down, Flow::Up] {
                let series = speed_series(&store, id, flow, window)?;
                export_both(&series, &out, &format!("{peer}-{}", flow.token()))?;
                if let Ok(accel) = acceleration_series(&series) {
                    export_both(&accel, &out, &format!("{peer}-{}-accel", flow.token()))?;
                }
                if flow == Flow::Down {
                    if let Some(cap) = cap.or(store.peer(id)?.down_limit) {
                        match plateau(&series.transfer_phase(), cap) {
                            Ok(Some(p)) => println!(
                                "{peer}\tramp_end={}\tplateau_mean={:.0}\tmax_abs_accel={:.0}\tmonotone_ramp={}",
                                p.ramp_end, p.mean, p.max_abs_accel, p.monotone_ramp
                            ),
                            Ok(None) => println!("{peer}\tramp_end=none"),
                            Err(e) => println!("{peer}\tramp_end=none\treason={e}"),
                        }
                    }
                }
            }
            let stats = message_stats(&store, id, window.unwrap_or_else(Window::all))?;
            export_both(&stats, &out, &format!("{peer}-messages"))?;
            println!("{peer}\tmessages={}", stats.total());
            Ok(0)
        }
        AnalyzeMode::Compare { db, peers, window, out } => {
            if peers.len() != 2 {
                bail!("--peers takes exactly two names");
            }
            let store = Store::open_read_only(&db)?;
            let a = find_peer(&store, &peers[0])?;
            let b = find_peer(&store, &peers[1])?;
            let window = parse_window(&store, a, window.as_deref())?;
            fs::create_dir_all(&out)?;
            let cmp = compare(&store, a, b, Flow::Down, window)?;
            export_both(&cmp, &out, &format!("{}-vs-{}", peers[0], peers[1]))?;
            export_both(&cmp.stats_a, &out, &format!("{}-messages", peers[0]))?;
            export_both(&cmp.stats_b, &out, &format!("{}-messages", peers[1]))?;
            let ratio = cmp.mean_ratio().map_or_else(|| "-".into(), |r| format!("{r:.3}"));
            println!("{}\t{}\tpaired={}\tmean_ratio={ratio}", peers[0], peers[1], cmp.pairs.len());
            Ok(0)
        }
    }
}

fn run() -> Result<i32> {
    match Cli::parse().command {
        Top::Agent(a) => run_agent(a),
        Top::Commander(c) => run_commander(c),
        Top::Parse(p) => run_parse(p),
        Top::Analyze { mode } => run_analyze(mode),
        Top::Dump { db } => {
            let store = Store::open_read_only(&db)?;
            let mut out = io::BufWriter::new(io::stdout().lock());
            store.canonical_dump(&mut out)?;
            out.flush()?;
            Ok(0)
        }
    }
}

fn main() {
    // SAFETY: restoring the default disposition so `dump | head` exits quietly.
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("swarmforge: {e:#}");
            std::process::exit(2);
        }
    }
}
