//! Client adapters: how the agent turns a START-CLIENT request into a
//! process command line for a particular BitTorrent client.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::logs::VlogDialect;
use crate::sim::Role;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AdapterError {
    #[error("adapter `{0}` is already registered")]
    DuplicateAdapter(String),
    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),
    #[error("missing path: {0}")]
    MissingPath(&'static str),
    #[error("argument contains a NUL byte: {0:?}")]
    BadArgument(String),
    #[error("adapter manifest: {0}")]
    Manifest(String),
}

/// Everything a client needs to join an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LaunchSpec {
    pub torrent: String,
    pub download_dir: String,
    pub slog: String,
    pub vlog: String,
    pub role: Option<Role>,
    /// Bytes per second; `None` is unlimited.
    pub down_limit: Option<u64>,
    pub up_limit: Option<u64>,
    /// Client-specific options, passed as `--<name> <value>` in order.
    pub extra: Vec<(String, String)>,
}

impl LaunchSpec {
    fn check(&self) -> Result<(), AdapterError> {
        for (name, value) in [
            ("torrent", &self.torrent),
            ("download dir", &self.download_dir),
            ("status log", &self.slog),
            ("verbose log", &self.vlog),
        ] {
            if value.is_empty() {
                return Err(AdapterError::MissingPath(name));
            }
        }
        Ok(())
    }

    fn push_extra(&self, argv: &mut Vec<String>) {
        for (name, value) in &self.extra {
            argv.push(format!("--{name}"));
            argv.push(value.clone());
        }
    }
}

pub trait ClientAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn dialect(&self) -> VlogDialect;
    /// The argv to execute directly (no shell). Deterministic.
    fn command_line(&self, launch: &LaunchSpec) -> Result<Vec<String>, AdapterError>;
}

fn finish(argv: Vec<String>) -> Result<Vec<String>, AdapterError> {
    match argv.iter().find(|a| a.contains('\0')) {
        Some(bad) => Err(AdapterError::BadArgument(bad.clone())),
        None => Ok(argv),
    }
}

/// The bundled `btsim` simulated client.
pub struct SimulatedAdapter {
    name: String,
    program: String,
    dialect: VlogDialect,
}

impl SimulatedAdapter {
    pub fn new(name: &str, program: &str, dialect: VlogDialect) -> Self {
        SimulatedAdapter { name: name.to_string(), program: program.to_string(), dialect }
    }
}

impl ClientAdapter for SimulatedAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn dialect(&self) -> VlogDialect {
        self.dialect
    }

    fn command_line(&self, l: &LaunchSpec) -> Result<Vec<String>, AdapterError> {
        l.check()?;
        let mut argv = vec![self.program.clone(), "--torrent".into(), l.torrent.clone()];
        if let Some(role) = l.role {
            argv.extend(["--role".into(), role.token().into()]);
        }
        if let Some(down) = l.down_limit {
            argv.extend(["--down".into(), down.to_string()]);
        }
        if let Some(up) = l.up_limit {
            argv.extend(["--up".into(), up.to_string()]);
        }
        argv.extend([
            "--slog".into(),
            l.slog.clone(),
            "--vlog".into(),
            l.vlog.clone(),
            "--dialect".into(),
            self.dialect.token().into(),
            "--download-dir".into(),
            l.download_dir.clone(),
        ]);
        l.push_extra(&mut argv);
        finish(argv)
    }
}

/// Command-line template for an instrumented hrktorrent (libtorrent) build.
/// It logs one verbose file per remote peer.
pub struct HrktorrentAdapter {
    program: String,
}

impl HrktorrentAdapter {
    pub fn new(program: &str) -> Self {
        HrktorrentAdapter { program: program.to_string() }
    }
}

impl ClientAdapter for HrktorrentAdapter {
    fn name(&self) -> &str {
        "hrktorrent"
    }

    fn dialect(&self) -> VlogDialect {
        VlogDialect::PerPeerFiles
    }

    fn command_line(&self, l: &LaunchSpec) -> Result<Vec<String>, AdapterError> {
        l.check()?;
        let mut argv = vec![
            self.program.clone(),
            "--downdir".into(),
            l.download_dir.clone(),
            "--statuslog".into(),
            l.slog.clone(),
            "--verboselog".into(),
            l.vlog.clone(),
        ];
        if let Some(down) = l.down_limit {
            argv.extend(["--maxdown".into(), down.to_string()]);
        }
        if let Some(up) = l.up_limit {
            argv.extend(["--maxup".into(), up.to_string()]);
        }
        l.push_extra(&mut argv);
        argv.push(l.torrent.clone());
        finish(argv)
    }
}

/// Command-line template for an instrumented Tribler command-line client,
/// which writes all verbose messages to a single file.
pub struct TriblerAdapter {
    program: String,
}

impl TriblerAdapter {
    pub fn new(program: &str) -> Self {
        TriblerAdapter { program: program.to_string() }
    }
}

impl ClientAdapter for TriblerAdapter {
    fn name(&self) -> &str {
        "tribler"
    }

    fn dialect(&self) -> VlogDialect {
        VlogDialect::UnifiedFile
    }

    fn command_line(&self, l: &LaunchSpec) -> Result<Vec<String>, AdapterError> {
        l.check()?;
        let mut argv = vec![
            self.program.clone(),
            "--torrent".into(),
            l.torrent.clone(),
            "--output-dir".into(),
            l.download_dir.clone(),
            "--status-log".into(),
            l.slog.clone(),
            "--verbose-log".into(),
            l.vlog.clone(),
        ];
        if let Some(down) = l.down_limit {
            argv.extend(["--max-download-rate".into(), down.to_string()]);
        }
        if let Some(up) = l.up_limit {
            argv.extend(["--max-upload-rate".into(), up.to_string()]);
        }
        l.push_extra(&mut argv);
        finish(argv)
    }
}

#[derive(Default, Clone)]
pub struct AdapterRegistry {
    adapters: BTreeMap<String, Arc<dyn ClientAdapter>>,
}

impl std::fmt::Debug for AdapterRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.adapters.keys()).finish()
    }
}

/// `[clients]` table of an adapter manifest: adapter name to executable.
#[derive(Debug, Deserialize)]
struct Manifest {
    #[serde(default)]
    clients: BTreeMap<String, String>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, adapter: Arc<dyn ClientAdapter>) -> Result<(), AdapterError> {
        let name = adapter.name().to_string();
        if self.adapters.contains_key(&name) {
            return Err(AdapterError::DuplicateAdapter(name));
        }
        self.adapters.insert(name, adapter);
        Ok(())
    }

    pub fn resolve(&self, name: &str) -> Result<Arc<dyn ClientAdapter>, AdapterError> {
        self.adapters.get(name).cloned().ok_or_else(|| AdapterError::UnknownAdapter(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    /// Registers the built-in adapter for each `name -> program` pair.
    /// `simulated` also brings `simulated-per-peer`, the same program
    /// logging in the per-peer dialect.
    pub fn with_programs(programs: &BTreeMap<String, String>) -> Result<Self, AdapterError> {
        let mut reg = AdapterRegistry::new();
        for (name, program) in programs {
            match name.as_str() {
                "simulated" => {
                    reg.register(Arc::new(SimulatedAdapter::new("simulated", program, VlogDialect::UnifiedFile)))?;
                    if !programs.contains_key("simulated-per-peer") {
                        reg.register(Arc::new(SimulatedAdapter::new(
                            "simulated-per-peer",
                            program,
                            VlogDialect::PerPeerFiles,
                        )))?;
                    }
                }
                "simulated-per-peer" => reg.register(Arc::new(SimulatedAdapter::new(
                    "simulated-per-peer",
                    program,
                    VlogDialect::PerPeerFiles,
                )))?,
                "hrktorrent" => reg.register(Arc::new(HrktorrentAdapter::new(program)))?,
                "tribler" => reg.register(Arc::new(TriblerAdapter::new(program)))?,
                other => return Err(AdapterError::Manifest(format!("no built-in adapter named `{other}`"))),
            }
        }
        Ok(reg)
    }

    /// Loads a TOML manifest:
    ///
    /// ```toml
    /// [clients]
    /// simulated = "/opt/swarmforge/bin/btsim"
    /// hrktorrent = "/opt/hrktorrent/hrktorrent"
    /// ```
    pub fn from_manifest(path: &Path) -> Result<Self, AdapterError> {
        let text = std::fs::read_to_string(path).map_err(|e| AdapterError::Manifest(format!("{}: {e}", path.display())))?;
        Self::from_manifest_str(&text)
    }

    pub fn from_manifest_str(text: &str) -> Result<Self, AdapterError> {
        let manifest: Manifest = toml::from_str(text).map_err(|e| AdapterError::Manifest(e.to_string()))?;
        Self::with_programs(&manifest.clients)
    }
}

/// Renders a manifest for [`AdapterRegistry::from_manifest`].
pub fn manifest_toml(programs: &BTreeMap<String, String>) -> String {
    #[derive(serde::Serialize)]
    struct Out<'a> {
        clients: &'a BTreeMap<String, String>,
    }
    toml::to_string(&Out { clients: programs }).expect("string map serializes")
}
