mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::thread;
use std::time::{Duration, Instant};

use common::*;

fn run(bin: &str, args: &[&str]) -> Output {
    Command::new(bin).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn btsim_standalone_then_parse_dump_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let torrent = write_torrent(d, 512 << 10);
    let (slog, vlog, down) = (d.join("l.slog"), d.join("l.vlog"), d.join("down"));
    let out = run(
        BTSIM,
        &[
            "--torrent", p(&torrent), "--role", "leecher", "--down", "131072", "--up", "65536",
            "--slog", p(&slog), "--vlog", p(&vlog), "--download-dir", p(&down), "--tick-ms", "0",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::metadata(down.join("payload.bin")).unwrap().len(), 512 << 10);
    let last = fs::read_to_string(&slog).unwrap();
    assert!(last.lines().last().unwrap().contains("eta=0"), "{last}");

    let db = d.join("x.db");
    let parsed = run(SWARMFORGE, &["parse", "--slog", p(&slog), "--vlog", p(&vlog), "--db", p(&db), "--peer", "local"]);
    assert!(parsed.status.success(), "{}", String::from_utf8_lossy(&parsed.stderr));
    let line = stdout(&parsed);
    assert!(line.starts_with("local\texperiment=1\tpeer=1\tstatus="), "{line}");
    assert!(line.contains("skipped=0"), "{line}");

    let dump = stdout(&run(SWARMFORGE, &["dump", "--db", p(&db)]));
    assert!(dump.starts_with("experiment\t1\timported\t"), "{dump}");
    assert!(dump.lines().any(|l| l.starts_with("verbose\t1\t")));

    let plots = d.join("plots");
    let analyzed = run(
        SWARMFORGE,
        &["analyze", "peer", "--db", p(&db), "--peer", "local", "--out", p(&plots), "--cap", "131072"],
    );
    assert!(analyzed.status.success(), "{}", String::from_utf8_lossy(&analyzed.stderr));
    let text = stdout(&analyzed);
    assert!(text.contains("plateau_mean=131072"), "{text}");
    for f in ["local-down.csv", "local-down.svg", "local-down-accel.csv", "local-messages.csv", "local-messages.svg"] {
        assert!(plots.join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(plots.join("local-down.csv")).unwrap();
    assert!(csv.lines().count() > 3);
    assert!(fs::read_to_string(plots.join("local-down.svg")).unwrap().starts_with("<svg"));

    // A window past the end of the session has no samples.
    let empty = run(
        SWARMFORGE,
        &["analyze", "peer", "--db", p(&db), "--peer", "local", "--out", p(&plots), "--window", "5000:6000"],
    );
    assert_eq!(empty.status.code(), Some(2));
}

#[test]
fn btsim_rejects_missing_torrent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(
        BTSIM,
        &[
            "--torrent", p(&d.join("nope.json")), "--slog", p(&d.join("s")), "--vlog", p(&d.join("v")),
            "--download-dir", p(d),
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("s").exists());
}

#[test]
fn commander_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let nodes = dir.path().join("nodes.xml");
    fs::write(&nodes, "<nodes><node id=\"a\" host=\"h\"/></nodes>").unwrap();
    let out = run(SWARMFORGE, &["commander", "--nodes", p(&nodes), "status"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lists no clients"));
}

#[test]
fn unreachable_node_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let nodes = dir.path().join("nodes.xml");
    fs::write(&nodes, cluster_xml([free_port(), free_port(), free_port()])).unwrap();
    let out = run(SWARMFORGE, &["commander", "--nodes", p(&nodes), "--nodes-filter", "n2", "getclients"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1, "{text}");
    assert!(text.starts_with("n2\tresult=ERR") || text.starts_with("n2\tresult=FAILED"), "{text}");
}

fn kill_agents(state_root: &Path) {
    for node in ["n1", "n2", "n3"] {
        let pid_file = state_root.join(node).join("agent.pid");
        if let Ok(pid) = fs::read_to_string(&pid_file) {
            let _ = Command::new("kill").arg(pid.trim()).status();
        }
    }
}

struct Agents<'a>(&'a Path);

impl Drop for Agents<'_> {
    fn drop(&mut self) {
        kill_agents(self.0);
    }
}

#[test]
fn commander_subcommands_against_bootstrapped_agents() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().canonicalize().unwrap();
    let torrent = write_torrent(&d, 256 << 10);
    let nodes = d.join("nodes.xml");
    let swarm = d.join("swarm.xml");
    fs::write(&nodes, cluster_xml([free_port(), free_port(), free_port()])).unwrap();
    fs::write(&swarm, swarm_xml(4, &torrent)).unwrap();
    let work = d.join("work");
    let state = d.join("agents");
    let commander = |args: &[&str]| {
        let mut all = vec!["commander", "--nodes", p(&nodes), "--swarm", p(&swarm), "--work-dir", p(&work)];
        all.extend(["--state-root", p(&state), "--tick-ms", "20"]);
        all.extend(args);
        run(SWARMFORGE, &all)
    };

    let boot = commander(&["bootstrap"]);
    let _guard = Agents(&state);
    assert!(boot.status.success(), "{}{}", stdout(&boot), String::from_utf8_lossy(&boot.stderr));
    assert_eq!(stdout(&boot).matches("result=OK\tbootstrap=started").count(), 3, "{}", stdout(&boot));
    // Agents outlive the commander that started them.
    let again = commander(&["bootstrap"]);
    assert_eq!(stdout(&again).matches("bootstrap=already-running").count(), 3, "{}", stdout(&again));

    let started = commander(&["start"]);
    assert!(started.status.success(), "{}", stdout(&started));
    assert_eq!(stdout(&started).lines().filter(|l| l.contains("result=OK")).count(), 5);
    assert!(work.join("roster.json").is_file());

    // Wait for every session to leave RUNNING.
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let listing = stdout(&commander(&["getclients"]));
        if !listing.contains("RUNNING") {
            assert_eq!(listing.matches("EXITED").count(), 5, "{listing}");
            break;
        }
        assert!(Instant::now() < deadline, "{listing}");
        thread::sleep(Duration::from_millis(100));
    }

    let status = commander(&["--nodes-filter", "n2", "--ids", "1", "status"]);
    let text = stdout(&status);
    assert!(status.status.success(), "{text}");
    assert!(text.starts_with("n2\tid=1\tresult=OK\tdown_speed="), "{text}");
    assert!(text.contains("eta=0"), "{text}");

    let output = commander(&["--nodes-filter", "n1", "--ids", "1", "getoutput"]);
    assert!(output.status.success(), "{}", stdout(&output));

    let stopped = commander(&["stop"]);
    assert!(stopped.status.success(), "{}", stdout(&stopped));

    let archived = commander(&["--nodes-filter", "n3", "archive"]);
    let text = stdout(&archived);
    assert!(archived.status.success(), "{text}");
    assert_eq!(text.matches("path=").count(), 2, "{text}");
    assert!(!work.join("fast-b/status.log").exists());

    let cleaned = commander(&["cleanup", "--down"]);
    assert!(cleaned.status.success(), "{}", stdout(&cleaned));
    for peer in ["fast-a", "fast-b", "slow-a", "slow-b"] {
        assert!(!work.join(peer).join("down/payload.bin").exists(), "{peer}");
    }
    assert!(work.join("fast-a/status.log").is_file());

    let none = commander(&["cleanup"]);
    assert_eq!(none.status.code(), Some(2));

    // SIGTERM shuts an agent down and removes its pid file.
    kill_agents(&state);
    let deadline = Instant::now() + Duration::from_secs(15);
    while state.join("n1/agent.pid").exists() {
        assert!(Instant::now() < deadline, "agent ignored SIGTERM");
        thread::sleep(Duration::from_millis(50));
    }
}
