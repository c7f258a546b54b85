//! The per-node agent daemon.
//!
//! Connections are served on their own threads; every command runs against
//! one session table behind a mutex. A poller thread reaps client processes
//! so that a session leaves `RUNNING` within one poll interval of its
//! process exiting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use flate2::write::GzEncoder;
use flate2::Compression;
use log::{debug, info, warn};

use crate::adapters::{AdapterRegistry, LaunchSpec};
use crate::config::parse_limit;
use crate::logs::{peer_from_file_name, read_last_status, VlogDialect};
use crate::sim::Role;
use crate::wire::{
    decode_command, encode_response, read_frame, write_frame, CommandEnvelope, CommandKind, ErrorCode,
    ResponseEnvelope, StatusReport, WireError,
};

/// GET-OUTPUT returns at most this many trailing bytes.
pub const OUTPUT_TAIL: u64 = 64 * 1024;
pub const STOP_GRACE: Duration = Duration::from_secs(5);
pub const POLL_INTERVAL: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Running,
    Stopped,
    Exited,
    Failed,
}

impl SessionState {
    pub fn token(self) -> &'static str {
        match self {
            SessionState::Running => "RUNNING",
            SessionState::Stopped => "STOPPED",
            SessionState::Exited => "EXITED",
            SessionState::Failed => "FAILED",
        }
    }

    pub fn from_token(s: &str) -> Option<SessionState> {
        [SessionState::Running, SessionState::Stopped, SessionState::Exited, SessionState::Failed]
            .into_iter()
            .find(|st| st.token() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub id: u64,
    pub client: String,
    pub torrent: PathBuf,
    pub download_dir: PathBuf,
    pub slog: PathBuf,
    pub vlog: PathBuf,
    pub dialect: VlogDialect,
    pub state: SessionState,
    pub exit_code: Option<i32>,
}

struct Session {
    record: SessionRecord,
    child: Option<Child>,
    stop_requested: Option<Instant>,
    output: PathBuf,
    /// Files in the download dir before the client started.
    preexisting: BTreeSet<PathBuf>,
}

impl Session {
    /// Collects the exit status if the process is gone. Returns true when
    /// the session is no longer running.
    fn reap(&mut self, grace: Duration) -> bool {
        let Some(child) = self.child.as_mut() else {
            return true;
        };
        match child.try_wait() {
            Ok(Some(status)) => {
                self.record.exit_code = status.code();
                self.record.state = if self.stop_requested.is_some() {
                    SessionState::Stopped
                } else if status.success() {
                    SessionState::Exited
                } else {
                    SessionState::Failed
                };
                self.child = None;
                debug!("session {} is {}", self.record.id, self.record.state.token());
                true
            }
            Ok(None) => {
                if self.stop_requested.is_some_and(|t| t.elapsed() >= grace) {
                    warn!("session {} ignored SIGTERM, killing", self.record.id);
                    let _ = child.kill();
                }
                false
            }
            Err(e) => {
                warn!("session {}: wait failed: {e}", self.record.id);
                false
            }
        }
    }

    fn terminate(&mut self) {
        if let Some(child) = &self.child {
            if self.stop_requested.is_none() {
                self.stop_requested = Some(Instant::now());
                // SAFETY: plain syscall on a pid we spawned and have not reaped.
                unsafe {
                    libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
                }
            }
        }
    }

    /// The verbose log, or for per-peer clients every `<vlog>.<ip:port>.log`.
    fn vlog_files(&self) -> Vec<PathBuf> {
        let vlog = &self.record.vlog;
        let mut files = Vec::new();
        if vlog.is_file() {
            files.push(vlog.clone());
        }
        let dir = match vlog.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let Some(base) = vlog.file_name().and_then(|n| n.to_str()) else {
            return files;
        };
        let prefix = format!("{base}.");
        if let Ok(entries) = fs::read_dir(&dir) {
            for entry in entries.flatten() {
                let path = entry.path();
                let name = entry.file_name();
                let Some(name) = name.to_str() else { continue };
                if name.starts_with(&prefix) && peer_from_file_name(&path).is_some() && path.is_file() {
                    // The address must be exactly what follows the prefix.
                    let rest = &name[prefix.len()..];
                    if peer_from_file_name(Path::new(rest)).is_some() {
                        files.push(path);
                    }
                }
            }
        }
        files.sort();
        files
    }

    fn download_files(&self) -> Vec<PathBuf> {
        let mut now = BTreeSet::new();
        list_files(&self.record.download_dir, &mut now);
        now.difference(&self.preexisting).cloned().collect()
    }
}

fn list_files(dir: &Path, out: &mut BTreeSet<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for entry in entries.flatten() {
        let path = entry.path();
        match entry.file_type() {
            Ok(t) if t.is_dir() => list_files(&path, out),
            Ok(_) => {
                out.insert(path);
            }
            Err(_) => {}
        }
    }
}

struct Table {
    next_id: u64,
    sessions: BTreeMap<u64, Session>,
    archives: Vec<PathBuf>,
}

pub struct AgentConfig {
    pub state_dir: PathBuf,
    pub registry: AdapterRegistry,
    pub poll_interval: Duration,
    pub stop_grace: Duration,
}

impl AgentConfig {
    pub fn new(state_dir: &Path, registry: AdapterRegistry) -> Self {
        AgentConfig {
            state_dir: state_dir.to_path_buf(),
            registry,
            poll_interval: POLL_INTERVAL,
            stop_grace: STOP_GRACE,
        }
    }
}

struct Shared {
    cfg: AgentConfig,
    table: Mutex<Table>,
    shutdown: AtomicBool,
}

/// Command handling, independent of any socket.
#[derive(Clone)]
pub struct Agent {
    shared: Arc<Shared>,
}

fn io_err(e: impl std::fmt::Display) -> ResponseEnvelope {
    ResponseEnvelope::err_with(ErrorCode::IoError, e.to_string())
}

fn bad_args(reason: impl Into<String>) -> ResponseEnvelope {
    ResponseEnvelope::err_with(ErrorCode::BadArgs, reason)
}

/// Response for a frame or envelope that could not be decoded.
pub fn error_response(err: &WireError) -> ResponseEnvelope {
    match err {
        WireError::UnknownCommand(_) => ResponseEnvelope::err_with(ErrorCode::UnknownCmd, err.to_string()),
        WireError::Io(_) => io_err(err),
        _ => bad_args(err.to_string()),
    }
}

impl Agent {
    pub fn new(cfg: AgentConfig) -> io::Result<Agent> {
        fs::create_dir_all(cfg.state_dir.join("sessions"))?;
        fs::create_dir_all(cfg.state_dir.join("archives"))?;
        Ok(Agent {
            shared: Arc::new(Shared {
                cfg,
                table: Mutex::new(Table { next_id: 1, sessions: BTreeMap::new(), archives: Vec::new() }),
                shutdown: AtomicBool::new(false),
            }),
        })
    }

    pub fn state_dir(&self) -> &Path {
        &self.shared.cfg.state_dir
    }

    fn table(&self) -> MutexGuard<'_, Table> {
        self.shared.table.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Snapshot of every session.
    pub fn sessions(&self) -> Vec<SessionRecord> {
        self.table().sessions.values().map(|s| s.record.clone()).collect()
    }

    /// Reaps exited processes once.
    pub fn poll(&self) {
        let grace = self.shared.cfg.stop_grace;
        for s in self.table().sessions.values_mut() {
            s.reap(grace);
        }
    }

    pub fn handle_frame(&self, frame: &[u8]) -> ResponseEnvelope {
        match decode_command(frame) {
            Ok(cmd) => self.handle(&cmd),
            Err(e) => error_response(&e),
        }
    }

    pub fn handle(&self, cmd: &CommandEnvelope) -> ResponseEnvelope {
        if let Err(e) = cmd.validate() {
            return error_response(&e);
        }
        let resp = match cmd.kind {
            CommandKind::StartClient => self.start_client(cmd),
            CommandKind::StopClient => self.with_id(cmd, |a, id| a.stop_client(id)),
            CommandKind::GetClients => self.get_clients(),
            CommandKind::GetStatus => self.with_id(cmd, |a, id| a.get_status(id)),
            CommandKind::GetOutput => self.with_id(cmd, |a, id| a.get_output(id)),
            CommandKind::Archive => self.archive(cmd),
            CommandKind::Cleanup => self.cleanup(cmd),
        };
        debug!("{} -> {}", cmd.kind, resp.error_code.map_or("OK", |c| c.token()));
        resp
    }

    fn with_id(&self, cmd: &CommandEnvelope, f: impl FnOnce(&Agent, u64) -> ResponseEnvelope) -> ResponseEnvelope {
        match cmd.get("ID").unwrap_or_default().parse::<u64>() {
            Ok(id) => f(self, id),
            Err(_) => bad_args("ID must be a positive integer"),
        }
    }

    fn start_client(&self, cmd: &CommandEnvelope) -> ResponseEnvelope {
        let get = |k: &str| cmd.get(k).unwrap_or_default().to_string();
        let client = get("CLIENT");
        let adapter = match self.shared.cfg.registry.resolve(&client) {
            Ok(a) => a,
            Err(e) => return bad_args(e.to_string()),
        };
        let torrent = PathBuf::from(get("TORRENT"));
        if let Err(e) = File::open(&torrent) {
            return bad_args(format!("torrent {}: {e}", torrent.display()));
        }
        let (slog, vlog, down_dir) = (PathBuf::from(get("SLOG")), PathBuf::from(get("VLOG")), PathBuf::from(get("DOWN_DIR")));
        if slog == vlog {
            return bad_args("SLOG and VLOG must differ");
        }
        let role = match cmd.get("ROLE") {
            None => None,
            Some(r) => match Role::from_token(r) {
                Some(role) => Some(role),
                None => return bad_args(format!("unknown role `{r}`")),
            },
        };
        let limit = |key: &str| -> Result<Option<u64>, ResponseEnvelope> {
            match cmd.get(key) {
                None => Ok(None),
                Some(v) => parse_limit(v).map_err(|e| bad_args(e.to_string())),
            }
        };
        let (down_limit, up_limit) = match (limit("DOWN"), limit("UP")) {
            (Ok(d), Ok(u)) => (d, u),
            (Err(e), _) | (_, Err(e)) => return e,
        };
        let extra = cmd
            .args
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("X_").map(|n| (n.to_ascii_lowercase().replace('_', "-"), v.clone())))
            .collect();
        let launch = LaunchSpec {
            torrent: get("TORRENT"),
            download_dir: get("DOWN_DIR"),
            slog: get("SLOG"),
            vlog: get("VLOG"),
            role,
            down_limit,
            up_limit,
            extra,
        };
        let argv = match adapter.command_line(&launch) {
            Ok(argv) => argv,
            Err(e) => return bad_args(e.to_string()),
        };

        for dir in [Some(down_dir.as_path()), slog.parent(), vlog.parent()].into_iter().flatten() {
            if !dir.as_os_str().is_empty() {
                if let Err(e) = fs::create_dir_all(dir) {
                    return io_err(format!("{}: {e}", dir.display()));
                }
            }
        }
        let mut preexisting = BTreeSet::new();
        list_files(&down_dir, &mut preexisting);

        let mut table = self.table();
        let id = table.next_id;
        let output = self.shared.cfg.state_dir.join("sessions").join(format!("{id}.out"));
        let spawned = (|| -> io::Result<Child> {
            let out = File::create(&output)?;
            let err = out.try_clone()?;
            Command::new(&argv[0]).args(&argv[1..]).stdin(Stdio::null()).stdout(out).stderr(err).spawn()
        })();
        let child = match spawned {
            Ok(c) => c,
            Err(e) => {
                let _ = fs::remove_file(&output);
                return ResponseEnvelope::err_with(ErrorCode::ClientFailed, format!("{}: {e}", argv[0]));
            }
        };
        table.next_id += 1;
        info!("session {id}: started {client} as pid {}", child.id());
        table.sessions.insert(
            id,
            Session {
                record: SessionRecord {
                    id,
                    client,
                    torrent,
                    download_dir: down_dir,
                    slog,
                    vlog,
                    dialect: adapter.dialect(),
                    state: SessionState::Running,
                    exit_code: None,
                },
                child: Some(child),
                stop_requested: None,
                output,
                preexisting,
            },
        );
        ResponseEnvelope::ok().with("id", id.to_string())
    }

    fn stop_client(&self, id: u64) -> ResponseEnvelope {
        let grace = self.shared.cfg.stop_grace;
        {
            let mut table = self.table();
            let Some(session) = table.sessions.get_mut(&id) else {
                return ResponseEnvelope::err(ErrorCode::NoSuchId);
            };
            if session.reap(grace) {
                return ResponseEnvelope::ok();
            }
            session.terminate();
        }
        // Wait outside the lock; the kill after the grace period happens in reap.
        let deadline = Instant::now() + grace + Duration::from_secs(5);
        loop {
            thread::sleep(Duration::from_millis(20));
            let mut table = self.table();
            let session = table.sessions.get_mut(&id).expect("sessions are never removed");
            if session.reap(grace) {
                return ResponseEnvelope::ok();
            }
            if Instant::now() > deadline {
                return ResponseEnvelope::err_with(ErrorCode::ClientFailed, "process did not exit");
            }
        }
    }

    fn get_clients(&self) -> ResponseEnvelope {
        self.poll();
        let table = self.table();
        let ids: Vec<String> = table.sessions.keys().map(u64::to_string).collect();
        let mut resp = ResponseEnvelope::ok().with("clients", ids.join(","));
        for (id, s) in &table.sessions {
            resp = resp.with(&format!("state_{id}"), s.record.state.token());
        }
        resp
    }

    fn get_status(&self, id: u64) -> ResponseEnvelope {
        let slog = match self.table().sessions.get(&id) {
            Some(s) => s.record.slog.clone(),
            None => return ResponseEnvelope::err(ErrorCode::NoSuchId),
        };
        match read_last_status(&slog) {
            Ok(Some(rec)) => StatusReport::from_record(&rec).to_response(),
            Ok(None) => io_err(format!("{}: no status yet", slog.display())),
            Err(e) => io_err(format!("{}: {e}", slog.display())),
        }
    }

    fn get_output(&self, id: u64) -> ResponseEnvelope {
        let path = match self.table().sessions.get(&id) {
            Some(s) => s.output.clone(),
            None => return ResponseEnvelope::err(ErrorCode::NoSuchId),
        };
        match tail(&path, OUTPUT_TAIL) {
            Ok(bytes) => ResponseEnvelope::ok().with("output", String::from_utf8_lossy(&bytes)),
            Err(e) => io_err(e),
        }
    }

    fn archive(&self, cmd: &CommandEnvelope) -> ResponseEnvelope {
        let mut files: Vec<PathBuf> = Vec::new();
        let mut name = cmd.get("NAME").map(str::to_string);
        if let Some(id) = cmd.get("ID") {
            let Ok(id) = id.parse::<u64>() else {
                return bad_args("ID must be a positive integer");
            };
            let table = self.table();
            let Some(s) = table.sessions.get(&id) else {
                return ResponseEnvelope::err(ErrorCode::NoSuchId);
            };
            if s.record.state == SessionState::Running {
                return bad_args(format!("session {id} is still running"));
            }
            if s.record.slog.is_file() {
                files.push(s.record.slog.clone());
            }
            files.extend(s.vlog_files());
            if files.is_empty() {
                return io_err(format!("session {id} has no logs left"));
            }
            name.get_or_insert_with(|| format!("session-{id}"));
        }
        if let Some(list) = cmd.get("FILES") {
            files.extend(list.split('\t').filter(|s| !s.is_empty()).map(PathBuf::from));
        }
        if files.is_empty() {
            return bad_args("nothing to archive");
        }
        let name = name.unwrap_or_else(|| "archive".to_string());
        if name.is_empty() || name.contains('/') || name.starts_with('.') {
            return bad_args(format!("bad archive name `{name}`"));
        }
        let dir = self.shared.cfg.state_dir.join("archives");
        let dest = {
            let table = self.table();
            let mut candidate = dir.join(format!("{name}.tar.gz"));
            let mut n = 1;
            while candidate.exists() || table.archives.contains(&candidate) {
                candidate = dir.join(format!("{name}-{n}.tar.gz"));
                n += 1;
            }
            // Reserve the name before writing outside the lock.
            drop(File::create(&candidate));
            candidate
        };
        match write_archive(&dest, &files) {
            Ok(entries) => {
                for f in &files {
                    if let Err(e) = fs::remove_file(f) {
                        warn!("archived {} but could not delete it: {e}", f.display());
                    }
                }
                self.table().archives.push(dest.clone());
                info!("archived {} files into {}", files.len(), dest.display());
                ResponseEnvelope::ok().with("path", dest.display().to_string()).with("files", entries.join("\t"))
            }
            Err(e) => {
                let _ = fs::remove_file(&dest);
                io_err(e)
            }
        }
    }

    fn cleanup(&self, cmd: &CommandEnvelope) -> ResponseEnvelope {
        let flag = |k: &str| cmd.get(k) == Some("1");
        let all = flag("ALL");
        let (down, vlogs, slogs, archives) =
            (all || flag("DOWN"), all || flag("VLOGS"), all || flag("SLOGS"), all || flag("ARCHIVE"));
        if !(down || vlogs || slogs || archives) {
            return bad_args("every cleanup flag is 0");
        }
        let mut doomed: Vec<PathBuf> = Vec::new();
        {
            let table = self.table();
            for s in table.sessions.values() {
                if slogs {
                    doomed.push(s.record.slog.clone());
                }
                if vlogs {
                    doomed.extend(s.vlog_files());
                }
                if down {
                    doomed.extend(s.download_files());
                }
            }
            if archives {
                doomed.extend(table.archives.iter().cloned());
            }
        }
        doomed.sort();
        doomed.dedup();
        let mut removed = 0;
        for path in &doomed {
            match fs::remove_file(path) {
                Ok(()) => removed += 1,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => {
                    return io_err(format!("{}: {e} (removed {removed} files before failing)", path.display()));
                }
            }
        }
        if archives {
            self.table().archives.retain(|p| p.exists());
        }
        info!("cleanup removed {removed} files");
        ResponseEnvelope::ok().with("removed", removed.to_string())
    }

    /// Terminates every running client, waiting up to the grace period.
    pub fn stop_all(&self) {
        let ids: Vec<u64> = self
            .table()
            .sessions
            .iter()
            .filter(|(_, s)| s.child.is_some())
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            self.stop_client(id);
        }
    }

    /// Binds and starts serving on background threads.
    pub fn bind(&self, host: &str, port: u16) -> io::Result<RunningAgent> {
        let listener = TcpListener::bind((host, port))?;
        let addr = listener.local_addr()?;
        info!("agent listening on {addr}");
        let accept = {
            let agent = self.clone();
            thread::Builder::new().name("agent-accept".into()).spawn(move || agent.accept_loop(listener))?
        };
        let poller = {
            let agent = self.clone();
            thread::Builder::new().name("agent-poll".into()).spawn(move || {
                while !agent.shared.shutdown.load(Ordering::SeqCst) {
                    agent.poll();
                    thread::sleep(agent.shared.cfg.poll_interval);
                }
            })?
        };
        Ok(RunningAgent { agent: self.clone(), addr, accept: Some(accept), poller: Some(poller) })
    }

    fn accept_loop(&self, listener: TcpListener) {
        for conn in listener.incoming() {
            if self.shared.shutdown.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let agent = self.clone();
                    let _ = thread::Builder::new().name("agent-conn".into()).spawn(move || agent.serve_connection(stream));
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    }

    /// Answers requests until the peer closes or sends a bad frame.
    pub fn serve_connection(&self, mut stream: TcpStream) {
        let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
        loop {
            let frame = match read_frame(&mut stream) {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(WireError::FrameTooShort) => {
                    debug!("{peer}: truncated frame");
                    break;
                }
                Err(e) => {
                    // Oversized header: answer, then drop the connection.
                    let _ = send(&mut stream, &error_response(&e));
                    break;
                }
            };
            let resp = match decode_command(&frame) {
                Ok(cmd) => self.handle(&cmd),
                Err(e @ (WireError::BadUtf8 | WireError::FrameTooLong(_) | WireError::FrameTooShort)) => {
                    let _ = send(&mut stream, &error_response(&e));
                    break;
                }
                Err(e) => error_response(&e),
            };
            if send(&mut stream, &resp).is_err() {
                break;
            }
        }
        let _ = stream.shutdown(Shutdown::Both);
    }
}

fn send(stream: &mut TcpStream, resp: &ResponseEnvelope) -> Result<(), WireError> {
    let bytes = match encode_response(resp) {
        Ok(b) => b,
        Err(e) => encode_response(&io_err(format!("response too large: {e}")))?,
    };
    write_frame(stream, &bytes)
}

fn tail(path: &Path, max: u64) -> io::Result<Vec<u8>> {
    let mut file = File::open(path)?;
    let len = file.metadata()?.len();
    file.seek(SeekFrom::Start(len.saturating_sub(max)))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Entry name for an absolute or relative path: the path without its root.
fn entry_name(path: &Path) -> io::Result<PathBuf> {
    let abs = fs::canonicalize(path)?;
    Ok(abs.components().filter(|c| matches!(c, std::path::Component::Normal(_))).collect())
}

/// Writes a gzip tar of `files` to `dest` and syncs it. Returns entry names.
fn write_archive(dest: &Path, files: &[PathBuf]) -> io::Result<Vec<String>> {
    let mut names = Vec::new();
    for f in files {
        let name = entry_name(f).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", f.display())))?;
        if !fs::metadata(f)?.is_file() {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("{} is not a file", f.display())));
        }
        names.push(name);
    }
    let out = OpenOptions::new().write(true).create(true).truncate(true).open(dest)?;
    let mut tar = tar::Builder::new(GzEncoder::new(out, Compression::default()));
    for (f, name) in files.iter().zip(&names) {
        tar.append_path_with_name(f, name)?;
    }
    let out = tar.into_inner()?.finish()?;
    out.sync_all()?;
    if let Some(parent) = dest.parent() {
        if let Ok(d) = File::open(parent) {
            let _ = d.sync_all();
        }
    }
    Ok(names.iter().map(|n| n.display().to_string()).collect())
}

/// Extracts an archive written by the agent into `dir`.
pub fn extract_archive(archive: &Path, dir: &Path) -> io::Result<()> {
    let gz = flate2::read::GzDecoder::new(File::open(archive)?);
    tar::Archive::new(gz).unpack(dir)
}

/// An agent serving on background threads.
pub struct RunningAgent {
    agent: Agent,
    addr: SocketAddr,
    accept: Option<JoinHandle<()>>,
    poller: Option<JoinHandle<()>>,
}

impl RunningAgent {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    /// Blocks until [`RunningAgent::shutdown`] is called from elsewhere.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting, terminates clients and joins the threads.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.agent.shared.shutdown.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect_timeout(&wake_addr(self.addr), Duration::from_secs(1));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        if let Some(h) = self.poller.take() {
            let _ = h.join();
        }
        self.agent.stop_all();
    }
}

/// Handle that lets another thread (or a signal watcher) stop the server.
pub fn shutdown_handle(running: &RunningAgent) -> impl Fn() + Send + 'static {
    let shared = running.agent.shared.clone();
    let addr = running.addr;
    move || {
        shared.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&wake_addr(addr), Duration::from_secs(1));
    }
}

fn wake_addr(addr: SocketAddr) -> SocketAddr {
    let mut a = addr;
    if a.ip().is_unspecified() {
        a.set_ip(match a {
            SocketAddr::V4(_) => std::net::Ipv4Addr::LOCALHOST.into(),
            SocketAddr::V6(_) => std::net::Ipv6Addr::LOCALHOST.into(),
        });
    }
    a
}

impl Drop for RunningAgent {
    fn drop(&mut self) {
        if self.accept.is_some() || self.poller.is_some() {
            self.stop();
        }
    }
}

/// Writes `<state_dir>/agent.pid`.
pub fn write_pid_file(state_dir: &Path) -> io::Result<PathBuf> {
    let path = state_dir.join("agent.pid");
    fs::write(&path, format!("{}\n", std::process::id()))?;
    Ok(path)
}
