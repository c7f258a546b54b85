//! Node inventory and swarm plan, both XML.
//!
//! ```xml
//! <nodes>
//!   <node id="p2p-01" host="10.0.0.1" agent-port="5000" ssh-port="22" user="exp" agent-path="/opt/swarmforge">
//!     <client name="simulated" path="/opt/btsim"/>
//!   </node>
//! </nodes>
//!
//! <swarm id="two-class" torrent="/srv/exp/content.json" seed="7">
//!   <peer node="p2p-01" client="simulated" role="seeder" up="unlimited"
//!         ddir="/srv/exp/down" slog="/srv/exp/s.slog" vlog="/srv/exp/s.vlog"/>
//! </swarm>
//! ```
//!
//! Rates are bytes per second; `512KB/s`, `512K` and `512KiB` all mean
//! 524288. A missing rate or `unlimited` means no cap.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use roxmltree::{Document, Node};
use thiserror::Error;

use crate::sim::Role;

pub const DEFAULT_AGENT_PORT: u16 = 5000;
pub const DEFAULT_SSH_PORT: u16 = 22;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Parse { line: u32, reason: String },
    #[error("duplicate node id `{0}`")]
    DuplicateNodeId(String),
    #[error("node `{node}`: invalid port `{value}`")]
    InvalidPort { node: String, value: String },
    #[error("placement references unknown node `{0}`")]
    UnknownNodeId(String),
    #[error("node `{node}` has no client `{client}`")]
    UnknownClient { node: String, client: String },
    #[error("swarm has no seeder")]
    NoSeeder,
    #[error("bad rate `{0}`")]
    BadLimit(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub node_id: String,
    pub host: String,
    pub agent_port: u16,
    pub ssh_port: u16,
    pub username: String,
    pub agent_path: String,
    /// Client name to executable path.
    pub client_paths: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementSpec {
    /// Identifier of the peer within the swarm; defaults to `peer-<n>`.
    pub peer_id: String,
    pub node_id: String,
    pub client: String,
    pub role: Role,
    /// Bytes per second; `None` is unlimited.
    pub down_limit: Option<u64>,
    pub up_limit: Option<u64>,
    pub download_dir: String,
    pub slog_path: String,
    pub vlog_path: String,
    /// Seconds after the scenario start.
    pub start_offset: u32,
    pub stop_offset: Option<u32>,
    /// Regular unchoke slots, for clients that take the setting.
    pub upload_slots: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwarmSpec {
    pub swarm_id: String,
    pub torrent_path: String,
    /// Seed handed to simulated clients.
    pub seed: u64,
    pub placements: Vec<PlacementSpec>,
}

impl SwarmSpec {
    pub fn num_seeders(&self) -> usize {
        self.placements.iter().filter(|p| p.role == Role::Seeder).count()
    }

    pub fn num_leechers(&self) -> usize {
        self.placements.len() - self.num_seeders()
    }
}

/// Parses a rate: plain bytes, a `K`/`KB`/`KiB` or `M`/`MB`/`MiB` multiple
/// of 1024, optionally followed by `/s`, or `unlimited`.
pub fn parse_limit(text: &str) -> Result<Option<u64>, ConfigError> {
    let bad = || ConfigError::BadLimit(text.to_string());
    let t = text.trim();
    if t.eq_ignore_ascii_case("unlimited") {
        return Ok(None);
    }
    let t = t.strip_suffix("/s").unwrap_or(t);
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    let (num, unit) = t.split_at(digits);
    let value: u64 = num.parse().map_err(|_| bad())?;
    let scale: u64 = match unit.to_ascii_uppercase().as_str() {
        "" | "B" => 1,
        "K" | "KB" | "KIB" => 1024,
        "M" | "MB" | "MIB" => 1024 * 1024,
        _ => return Err(bad()),
    };
    match value.checked_mul(scale) {
        Some(0) | None => Err(bad()),
        Some(v) => Ok(Some(v)),
    }
}

fn format_limit(limit: Option<u64>) -> String {
    limit.map_or_else(|| "unlimited".to_string(), |v| v.to_string())
}

struct Element<'a, 'input> {
    doc: &'a Document<'input>,
    node: Node<'a, 'input>,
}

impl<'a, 'input> Element<'a, 'input> {
    fn line(&self) -> u32 {
        self.doc.text_pos_at(self.node.range().start).row
    }

    fn error(&self, reason: impl Into<String>) -> ConfigError {
        ConfigError::Parse { line: self.line(), reason: reason.into() }
    }

    fn only_attributes(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for attr in self.node.attributes() {
            if !allowed.contains(&attr.name()) {
                return Err(self.error(format!(
                    "unknown attribute `{}` on <{}>",
                    attr.name(),
                    self.node.tag_name().name()
                )));
            }
        }
        Ok(())
    }

    fn opt(&self, name: &str) -> Option<&'a str> {
        self.node.attribute(name)
    }

    fn req(&self, name: &str) -> Result<&'a str, ConfigError> {
        match self.opt(name) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(self.error(format!("<{}> needs `{name}`", self.node.tag_name().name()))),
        }
    }

    fn number<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>, ConfigError> {
        self.opt(name)
            .map(|v| v.parse().map_err(|_| self.error(format!("`{name}` is not a number: `{v}`"))))
            .transpose()
    }

    fn children(&self, tag: &str) -> Result<Vec<Element<'a, 'input>>, ConfigError> {
        let mut out = Vec::new();
        for child in self.node.children().filter(Node::is_element) {
            if child.tag_name().name() != tag {
                return Err(ConfigError::Parse {
                    line: self.doc.text_pos_at(child.range().start).row,
                    reason: format!("unexpected <{}>", child.tag_name().name()),
                });
            }
            out.push(Element { doc: self.doc, node: child });
        }
        Ok(out)
    }
}

fn parse_doc(document: &str) -> Result<Document<'_>, ConfigError> {
    Document::parse(document).map_err(|e| ConfigError::Parse { line: e.pos().row, reason: e.to_string() })
}

fn root<'a, 'input>(doc: &'a Document<'input>, tag: &str) -> Result<Element<'a, 'input>, ConfigError> {
    let el = Element { doc, node: doc.root_element() };
    if el.node.tag_name().name() != tag {
        return Err(el.error(format!("expected <{tag}>, found <{}>", el.node.tag_name().name())));
    }
    Ok(el)
}

fn port(el: &Element, node: &str, name: &str, default: u16) -> Result<u16, ConfigError> {
    match el.opt(name) {
        None => Ok(default),
        Some(v) => match v.parse::<u16>() {
            Ok(p) if p > 0 => Ok(p),
            _ => Err(ConfigError::InvalidPort { node: node.to_string(), value: v.to_string() }),
        },
    }
}

pub fn load_nodes(document: &str) -> Result<Vec<NodeSpec>, ConfigError> {
    let doc = parse_doc(document)?;
    let nodes = root(&doc, "nodes")?;
    nodes.only_attributes(&[])?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for el in nodes.children("node")? {
        el.only_attributes(&["id", "host", "agent-port", "ssh-port", "user", "agent-path"])?;
        let node_id = el.req("id")?.to_string();
        if !seen.insert(node_id.clone()) {
            return Err(ConfigError::DuplicateNodeId(node_id));
        }
        let mut client_paths = BTreeMap::new();
        for client in el.children("client")? {
            client.only_attributes(&["name", "path"])?;
            let name = client.req("name")?.to_string();
            if client_paths.insert(name.clone(), client.req("path")?.to_string()).is_some() {
                return Err(client.error(format!("client `{name}` listed twice")));
            }
        }
        if client_paths.is_empty() {
            return Err(el.error(format!("node `{node_id}` lists no clients")));
        }
        out.push(NodeSpec {
            host: el.req("host")?.to_string(),
            agent_port: port(&el, &node_id, "agent-port", DEFAULT_AGENT_PORT)?,
            ssh_port: port(&el, &node_id, "ssh-port", DEFAULT_SSH_PORT)?,
            username: el.opt("user").unwrap_or_default().to_string(),
            agent_path: el.opt("agent-path").unwrap_or_default().to_string(),
            client_paths,
            node_id,
        });
    }
    Ok(out)
}

pub fn load_swarm(document: &str, inventory: &[NodeSpec]) -> Result<SwarmSpec, ConfigError> {
    let doc = parse_doc(document)?;
    let swarm = root(&doc, "swarm")?;
    swarm.only_attributes(&["id", "torrent", "seed"])?;
    let mut placements = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, el) in swarm.children("peer")?.into_iter().enumerate() {
        el.only_attributes(&[
            "id", "node", "client", "role", "down", "up", "ddir", "slog", "vlog", "start", "stop", "slots",
        ])?;
        let node_id = el.req("node")?.to_string();
        let node = inventory
            .iter()
            .find(|n| n.node_id == node_id)
            .ok_or_else(|| ConfigError::UnknownNodeId(node_id.clone()))?;
        let client = el.req("client")?.to_string();
        if !node.client_paths.contains_key(&client) {
            return Err(ConfigError::UnknownClient { node: node_id, client });
        }
        let role_text = el.req("role")?;
        let role = Role::from_token(role_text).ok_or_else(|| el.error(format!("bad role `{role_text}`")))?;
        let limit = |name: &str| el.opt(name).map_or(Ok(None), parse_limit);
        let start_offset = el.number("start")?.unwrap_or(0);
        let stop_offset: Option<u32> = el.number("stop")?;
        if stop_offset.is_some_and(|s| s <= start_offset) {
            return Err(el.error("`stop` must come after `start`"));
        }
        let upload_slots: Option<usize> = el.number("slots")?;
        if upload_slots == Some(0) {
            return Err(el.error("`slots` must be positive"));
        }
        let peer_id = el.opt("id").map_or_else(|| format!("peer-{}", i + 1), str::to_string);
        if !ids.insert(peer_id.clone()) {
            return Err(el.error(format!("duplicate peer id `{peer_id}`")));
        }
        let placement = PlacementSpec {
            peer_id,
            node_id,
            client,
            role,
            down_limit: limit("down")?,
            up_limit: limit("up")?,
            download_dir: el.req("ddir")?.to_string(),
            slog_path: el.req("slog")?.to_string(),
            vlog_path: el.req("vlog")?.to_string(),
            start_offset,
            stop_offset,
            upload_slots,
        };
        if placement.slog_path == placement.vlog_path {
            return Err(el.error("slog and vlog must differ"));
        }
        placements.push(placement);
    }
    let spec = SwarmSpec {
        swarm_id: swarm.req("id")?.to_string(),
        torrent_path: swarm.req("torrent")?.to_string(),
        seed: swarm.number("seed")?.unwrap_or(0),
        placements,
    };
    if spec.num_seeders() == 0 {
        return Err(ConfigError::NoSeeder);
    }
    Ok(spec)
}

fn attr(out: &mut String, name: &str, value: &str) {
    let _ = write!(out, " {name}=\"");
    for c in value.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\n' => out.push_str("&#10;"),
            '\t' => out.push_str("&#9;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
    out.push('"');
}

pub fn nodes_to_xml(nodes: &[NodeSpec]) -> String {
    let mut out = String::from("<nodes>\n");
    for n in nodes {
        out.push_str("  <node");
        attr(&mut out, "id", &n.node_id);
        attr(&mut out, "host", &n.host);
        attr(&mut out, "agent-port", &n.agent_port.to_string());
        attr(&mut out, "ssh-port", &n.ssh_port.to_string());
        attr(&mut out, "user", &n.username);
        attr(&mut out, "agent-path", &n.agent_path);
        out.push_str(">\n");
        for (name, path) in &n.client_paths {
            out.push_str("    <client");
            attr(&mut out, "name", name);
            attr(&mut out, "path", path);
            out.push_str("/>\n");
        }
        out.push_str("  </node>\n");
    }
    out.push_str("</nodes>\n");
    out
}

pub fn swarm_to_xml(swarm: &SwarmSpec) -> String {
    let mut out = String::from("<swarm");
    attr(&mut out, "id", &swarm.swarm_id);
    attr(&mut out, "torrent", &swarm.torrent_path);
    attr(&mut out, "seed", &swarm.seed.to_string());
    out.push_str(">\n");
    for p in &swarm.placements {
        out.push_str("  <peer");
        attr(&mut out, "id", &p.peer_id);
        attr(&mut out, "node", &p.node_id);
        attr(&mut out, "client", &p.client);
        attr(&mut out, "role", p.role.token());
        attr(&mut out, "down", &format_limit(p.down_limit));
        attr(&mut out, "up", &format_limit(p.up_limit));
        attr(&mut out, "ddir", &p.download_dir);
        attr(&mut out, "slog", &p.slog_path);
        attr(&mut out, "vlog", &p.vlog_path);
        attr(&mut out, "start", &p.start_offset.to_string());
        if let Some(stop) = p.stop_offset {
            attr(&mut out, "stop", &stop.to_string());
        }
        if let Some(slots) = p.upload_slots {
            attr(&mut out, "slots", &slots.to_string());
        }
        out.push_str("/>\n");
    }
    out.push_str("</swarm>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NODES: &str = r#"<nodes>
  <node id="p2p-01" host="10.0.0.1" agent-port="5001" ssh-port="2222" user="exp" agent-path="/opt/sf">
    <client name="simulated" path="/opt/btsim"/>
    <client name="hrktorrent" path="/opt/hrk"/>
  </node>
  <node id="p2p-02" host="10.0.0.2">
    <client name="simulated" path="/opt/btsim"/>
  </node>
</nodes>"#;

    fn peer(node: &str, role: &str, down: &str, up: &str) -> String {
        format!(
            r#"<peer node="{node}" client="simulated" role="{role}" down="{down}" up="{up}" ddir="/d" slog="/l/{node}-{role}.slog" vlog="/l/{node}.vlog"/>"#
        )
    }

    #[test]
    fn loads_nodes_with_defaults() {
        let nodes = load_nodes(NODES).unwrap();
        assert_eq!(nodes.len(), 2);
        assert_eq!(nodes[0].agent_port, 5001);
        assert_eq!(nodes[0].ssh_port, 2222);
        assert_eq!(nodes[0].client_paths["hrktorrent"], "/opt/hrk");
        assert_eq!(nodes[1].agent_port, DEFAULT_AGENT_PORT);
        assert_eq!(nodes[1].ssh_port, DEFAULT_SSH_PORT);
        assert_eq!(load_nodes("<nodes/>").unwrap(), vec![]);
    }

    #[test]
    fn hundred_containers() {
        let mut xml = String::from("<nodes>");
        for host in 1..=10 {
            for ct in 1..=10 {
                let _ = write!(
                    xml,
                    r#"<node id="h{host:02}-c{ct:02}" host="10.0.{host}.{ct}"><client name="simulated" path="/b"/></node>"#
                );
            }
        }
        xml.push_str("</nodes>");
        let nodes = load_nodes(&xml).unwrap();
        assert_eq!(nodes.len(), 100);
        assert_eq!(nodes[42].node_id, "h05-c03");
    }

    #[test]
    fn node_errors() {
        let dup = r#"<nodes><node id="p2p-01" host="a"><client name="x" path="y"/></node><node id="p2p-01" host="b"><client name="x" path="y"/></node></nodes>"#;
        assert_eq!(load_nodes(dup), Err(ConfigError::DuplicateNodeId("p2p-01".into())));
        let bad_port = r#"<nodes><node id="a" host="h" agent-port="70000"><client name="x" path="y"/></node></nodes>"#;
        assert!(matches!(load_nodes(bad_port), Err(ConfigError::InvalidPort { .. })));
        let zero = bad_port.replace("70000", "0");
        assert!(matches!(load_nodes(&zero), Err(ConfigError::InvalidPort { .. })));
        let no_clients = r#"<nodes><node id="a" host="h"/></nodes>"#;
        assert!(matches!(load_nodes(no_clients), Err(ConfigError::Parse { .. })));
        let typo = "<nodes>\n<node id=\"a\" hots=\"h\"><client name=\"x\" path=\"y\"/></node></nodes>";
        assert_eq!(
            load_nodes(typo),
            Err(ConfigError::Parse { line: 2, reason: "unknown attribute `hots` on <node>".into() })
        );
        assert!(matches!(load_nodes("<nodes><node"), Err(ConfigError::Parse { line: 1, .. })));
    }

    #[test]
    fn limits() {
        assert_eq!(parse_limit("524288").unwrap(), Some(524_288));
        assert_eq!(parse_limit("512KB/s").unwrap(), Some(524_288));
        assert_eq!(parse_limit("512K").unwrap(), Some(524_288));
        assert_eq!(parse_limit("64KiB/s").unwrap(), Some(65_536));
        assert_eq!(parse_limit("2MB").unwrap(), Some(2 << 20));
        assert_eq!(parse_limit("unlimited").unwrap(), None);
        for bad in ["0", "-5", "fast", "12XB", "", "99999999999999999999K"] {
            assert!(matches!(parse_limit(bad), Err(ConfigError::BadLimit(_))), "{bad}");
        }
    }

    #[test]
    fn two_class_swarm() {
        let nodes = load_nodes(NODES).unwrap();
        let mut xml = String::from(r#"<swarm id="two-class" torrent="/t/content.json" seed="9">"#);
        xml.push_str(&peer("p2p-01", "seeder", "unlimited", "unlimited"));
        for _ in 0..50 {
            xml.push_str(&peer("p2p-01", "leecher", "512KB/s", "256KB/s"));
        }
        for _ in 0..50 {
            xml.push_str(&peer("p2p-02", "leecher", "64KB/s", "32KB/s"));
        }
        xml.push_str("</swarm>");
        let swarm = load_swarm(&xml, &nodes).unwrap();
        assert_eq!(swarm.placements.len(), 101);
        assert_eq!(swarm.num_seeders(), 1);
        assert_eq!(swarm.num_leechers(), 100);
        assert_eq!(swarm.seed, 9);
        let fast = swarm.placements.iter().filter(|p| p.down_limit == Some(524_288) && p.up_limit == Some(262_144));
        assert_eq!(fast.count(), 50);
        let slow = swarm.placements.iter().filter(|p| p.down_limit == Some(65_536) && p.up_limit == Some(32_768));
        assert_eq!(slow.count(), 50);
        assert_eq!(swarm.placements[3].peer_id, "peer-4");
    }

    #[test]
    fn swarm_errors() {
        let nodes = load_nodes(NODES).unwrap();
        let wrap = |body: String| format!(r#"<swarm id="s" torrent="/t">{body}</swarm>"#);
        let ghost = wrap(peer("ghost", "seeder", "1", "1"));
        assert_eq!(load_swarm(&ghost, &nodes), Err(ConfigError::UnknownNodeId("ghost".into())));
        let leechers = wrap(peer("p2p-01", "leecher", "1", "1") + &peer("p2p-02", "leecher", "1", "1"));
        assert_eq!(load_swarm(&leechers, &nodes), Err(ConfigError::NoSeeder));
        let bad = wrap(peer("p2p-01", "seeder", "0", "1"));
        assert!(matches!(load_swarm(&bad, &nodes), Err(ConfigError::BadLimit(_))));
        let client = wrap(peer("p2p-02", "seeder", "1", "1").replace("simulated", "tribler"));
        assert!(matches!(load_swarm(&client, &nodes), Err(ConfigError::UnknownClient { .. })));
        let backwards = wrap(peer("p2p-01", "seeder", "1", "1").replace("/>", r#" start="5" stop="5"/>"#));
        assert!(matches!(load_swarm(&backwards, &nodes), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn every_placement_resolves_to_a_client_path() {
        let nodes = load_nodes(NODES).unwrap();
        let xml = format!(r#"<swarm id="s" torrent="/t">{}{}</swarm>"#, peer("p2p-01", "seeder", "1", "1"), peer("p2p-02", "leecher", "1K", "1K"));
        let swarm = load_swarm(&xml, &nodes).unwrap();
        for p in &swarm.placements {
            let node = nodes.iter().find(|n| n.node_id == p.node_id).unwrap();
            assert!(node.client_paths.contains_key(&p.client));
        }
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[ -~\t\n]{1,12}".prop_filter("needs a visible char", |s| s.trim() == s && !s.is_empty())
    }

    fn arb_nodes() -> impl Strategy<Value = Vec<NodeSpec>> {
        prop::collection::vec(
            (arb_text(), 1u16.., 1u16.., "[a-z]{0,6}", arb_text(), prop::collection::btree_map("[a-z]{1,6}", arb_text(), 1..3)),
            1..4,
        )
        .prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (host, agent_port, ssh_port, username, agent_path, client_paths))| NodeSpec {
                    node_id: format!("n{i}"),
                    host,
                    agent_port,
                    ssh_port,
                    username,
                    agent_path,
                    client_paths,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn reload_is_identity(
            nodes in arb_nodes(),
            limits in prop::collection::vec((prop::option::of(1u64..1 << 40), prop::option::of(1u64..1 << 40), 0u32..100, prop::option::of(1u32..50)), 1..6),
            seed in any::<u64>(),
            path in arb_text(),
        ) {
            let reloaded = load_nodes(&nodes_to_xml(&nodes)).unwrap();
            prop_assert_eq!(&reloaded, &nodes);
            let placements = limits
                .into_iter()
                .enumerate()
                .map(|(i, (down, up, start, stop))| {
                    let node = &nodes[i % nodes.len()];
                    PlacementSpec {
                        peer_id: format!("x{i}"),
                        node_id: node.node_id.clone(),
                        client: node.client_paths.keys().next().unwrap().clone(),
                        role: if i == 0 { Role::Seeder } else { Role::Leecher },
                        down_limit: down,
                        up_limit: up,
                        download_dir: path.clone(),
                        slog_path: format!("{path}.slog"),
                        vlog_path: format!("{path}.vlog"),
                        start_offset: start,
                        stop_offset: stop.map(|s| start + s),
                        upload_slots: if i == 0 { Some(8) } else { None },
                    }
                })
                .collect();
            let swarm = SwarmSpec { swarm_id: "s".into(), torrent_path: path, seed, placements };
            let xml = swarm_to_xml(&swarm);
            let again = load_swarm(&xml, &nodes).unwrap();
            prop_assert_eq!(swarm_to_xml(&again), xml);
            prop_assert_eq!(again, swarm);
        }
    }
}
