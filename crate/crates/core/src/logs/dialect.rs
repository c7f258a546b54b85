use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LogError;

/// How a client lays out its verbose log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VlogDialect {
    /// One file per remote peer, the address embedded in the file name
    /// (libtorrent / hrktorrent style).
    PerPeerFiles,
    /// A single file with a `peer=` column (Tribler style).
    UnifiedFile,
}

impl VlogDialect {
    pub fn token(self) -> &'static str {
        match self {
            VlogDialect::PerPeerFiles => "per-peer",
            VlogDialect::UnifiedFile => "unified",
        }
    }

    pub fn from_token(s: &str) -> Option<VlogDialect> {
        match s {
            "per-peer" => Some(VlogDialect::PerPeerFiles),
            "unified" => Some(VlogDialect::UnifiedFile),
            _ => None,
        }
    }
}

/// `<vlog>.<ip:port>.log`, the file a per-peer client writes for one remote.
pub fn per_peer_file_name(vlog: &Path, remote: &str) -> PathBuf {
    let mut name = vlog.as_os_str().to_os_string();
    name.push(format!(".{remote}.log"));
    PathBuf::from(name)
}

/// Extracts the `ip:port` a per-peer file name embeds, if any.
pub fn peer_from_file_name(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".log")?;
    let (head, port) = stem.rsplit_once(':')?;
    if port.is_empty() || !port.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let octets: Vec<&str> = head.rsplitn(5, '.').take(4).collect();
    if octets.len() != 4 || !octets.iter().all(|o| o.parse::<u8>().is_ok()) {
        return None;
    }
    let ip: Vec<&str> = octets.into_iter().rev().collect();
    Some(format!("{}:{port}", ip.join(".")))
}

/// Decides the dialect of a set of verbose log files from their names.
///
/// A single file without an embedded address is a unified log; any number of
/// files that all embed an address is a per-peer log set. Everything else is
/// ambiguous.
pub fn detect_dialect(paths: &[PathBuf]) -> Result<VlogDialect, LogError> {
    if paths.is_empty() {
        return Err(LogError::AmbiguousDialect("no verbose log files".into()));
    }
    let embedded = paths.iter().filter(|p| peer_from_file_name(p).is_some()).count();
    if embedded == paths.len() {
        Ok(VlogDialect::PerPeerFiles)
    } else if embedded == 0 && paths.len() == 1 {
        Ok(VlogDialect::UnifiedFile)
    } else {
        Err(LogError::AmbiguousDialect(format!(
            "{} of {} files embed a peer address",
            embedded,
            paths.len()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_address_from_name() {
        assert_eq!(
            peer_from_file_name(Path::new("/x/vlog.10.0.1.7:6881.log")).as_deref(),
            Some("10.0.1.7:6881")
        );
        assert_eq!(peer_from_file_name(Path::new("10.0.1.7:6881.log")).as_deref(), Some("10.0.1.7:6881"));
        assert_eq!(peer_from_file_name(Path::new("/x/vlog.log")), None);
        assert_eq!(peer_from_file_name(Path::new("/x/vlog.1.2.3:80.log")), None);
        assert_eq!(peer_from_file_name(Path::new("/x/vlog.1.2.3.999:80.log")), None);
    }

    #[test]
    fn file_name_round_trip() {
        let p = per_peer_file_name(Path::new("/tmp/p01.vlog"), "10.0.0.9:6881");
        assert_eq!(p, PathBuf::from("/tmp/p01.vlog.10.0.0.9:6881.log"));
        assert_eq!(peer_from_file_name(&p).as_deref(), Some("10.0.0.9:6881"));
    }

    #[test]
    fn detection_cases() {
        assert_eq!(detect_dialect(&[PathBuf::from("peer.vlog")]).unwrap(), VlogDialect::UnifiedFile);
        let seven: Vec<PathBuf> =
            (1..=7).map(|i| PathBuf::from(format!("vlog.10.0.1.{i}:6881.log"))).collect();
        assert_eq!(detect_dialect(&seven).unwrap(), VlogDialect::PerPeerFiles);
        assert!(matches!(detect_dialect(&[]), Err(LogError::AmbiguousDialect(_))));
        let mixed = vec![PathBuf::from("a.vlog"), PathBuf::from("vlog.10.0.1.1:6881.log")];
        assert!(detect_dialect(&mixed).is_err());
        assert!(detect_dialect(&[PathBuf::from("a.vlog"), PathBuf::from("b.vlog")]).is_err());
    }
}
