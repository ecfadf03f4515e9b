//! Line-oriented scenario configuration: `section.key = value`, `#` comments.
//!
//! Durations accept `us`, `ms` and `s` suffixes; a bare integer is microseconds.
//! Failure schedules are comma-separated `down..up` intervals with `inf` for never.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::estimator::ChannelParams;
use crate::mdc::EncoderConfig;
use crate::packet::PacketKind;
use crate::routing::ProtocolConfig;
use crate::sim::{FailureInterval, ForcedDrop, Link, MulticastTree, SimError, Topology};
use crate::types::{link_key, Flow, NodeId, SimTime};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line number; 0 for errors not tied to a single line.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    pub delay: SimTime,
    pub loss: f64,
    pub failures: Vec<(SimTime, SimTime)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoSpec {
    pub frames: u32,
    pub frame_interval: SimTime,
    pub start: SimTime,
    pub encoder: EncoderConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSpec {
    pub seed: u64,
    pub horizon: SimTime,
    pub trials: u32,
}

/// Randomized failure used by the loss oracle: each trial takes `link` down
/// permanently at a time drawn uniformly from `[window.0, window.1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub link: (NodeId, NodeId),
    pub window: (SimTime, SimTime),
    pub max_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub nodes: Vec<NodeId>,
    pub links: Vec<LinkSpec>,
    pub source: NodeId,
    /// `None` for multicast scenarios.
    pub destination: Option<NodeId>,
    /// Statically provisioned routes, one per path tag.
    pub paths: BTreeMap<u8, Vec<NodeId>>,
    /// Alternate routes the source may fall back on, per path tag.
    pub route_cache: BTreeMap<u8, Vec<Vec<NodeId>>>,
    /// `(child, parent)` pairs.
    pub multicast_tree: Option<Vec<(NodeId, NodeId)>>,
    pub channel: ChannelParams,
    pub max_retries: u32,
    pub estimate_window: usize,
    pub discovery_timeout: SimTime,
    pub rreq_retries: u32,
    pub discovery_backoff: SimTime,
    pub video: VideoSpec,
    pub run: RunSpec,
    pub drops: Vec<ForcedDrop>,
    pub oracle: Option<OracleSpec>,
}

impl ScenarioConfig {
    /// Defaults for everything except topology and endpoints.
    pub fn with_nodes(nodes: impl IntoIterator<Item = u32>, source: u32, destination: Option<u32>) -> Self {
        let p = ProtocolConfig::default();
        ScenarioConfig {
            name: "scenario".into(),
            nodes: nodes.into_iter().map(NodeId).collect(),
            links: Vec::new(),
            source: NodeId(source),
            destination: destination.map(NodeId),
            paths: BTreeMap::new(),
            route_cache: BTreeMap::new(),
            multicast_tree: None,
            channel: p.channel,
            max_retries: p.max_retries,
            estimate_window: p.estimate_window,
            discovery_timeout: p.discovery_timeout,
            rreq_retries: p.rreq_retries,
            discovery_backoff: p.discovery_backoff,
            video: VideoSpec {
                frames: 8,
                frame_interval: SimTime::from_millis(16),
                start: SimTime::ZERO,
                encoder: EncoderConfig::default(),
            },
            run: RunSpec {
                seed: 1,
                horizon: SimTime::from_secs(2),
                trials: 1,
            },
            drops: Vec::new(),
            oracle: None,
        }
    }

    pub fn add_link(&mut self, a: u32, b: u32, delay: SimTime) -> &mut LinkSpec {
        self.links.push(LinkSpec {
            a: NodeId(a),
            b: NodeId(b),
            delay,
            loss: 0.0,
            failures: Vec::new(),
        });
        self.links.last_mut().expect("just pushed")
    }

    pub fn link_mut(&mut self, a: u32, b: u32) -> Option<&mut LinkSpec> {
        let key = link_key(NodeId(a), NodeId(b));
        self.links.iter_mut().find(|l| link_key(l.a, l.b) == key)
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            max_retries: self.max_retries,
            t_retrans: self.channel.t_retrans,
            discovery_timeout: self.discovery_timeout,
            rreq_retries: self.rreq_retries,
            discovery_backoff: self.discovery_backoff,
            estimate_window: self.estimate_window,
            channel: self.channel,
        }
    }

    pub fn topology(&self) -> Result<Topology, SimError> {
        let mut topo = Topology::new(self.nodes.iter().copied());
        for l in &self.links {
            let idx = topo.add_link(Link::new(l.a, l.b, l.delay, l.loss)?)?;
            for &(down_at, up_at) in &l.failures {
                topo.link_mut(idx).add_failure(FailureInterval { down_at, up_at })?;
            }
        }
        if let Some(pairs) = &self.multicast_tree {
            let tree = MulticastTree::new(self.source, pairs.iter().copied().collect())?;
            topo.set_multicast_tree(tree)?;
        }
        Ok(topo)
    }

    pub fn is_multicast(&self) -> bool {
        self.multicast_tree.is_some()
    }

    /// Flow carrying each description, indexed by description id.
    pub fn flows(&self) -> Vec<Flow> {
        if self.is_multicast() {
            return vec![Flow::multicast(self.source)];
        }
        let dest = self.destination.unwrap_or(self.source);
        let count = if self.paths.is_empty() {
            self.video.encoder.descriptions.max(1) as usize
        } else {
            self.paths.len()
        };
        let tags: Vec<u8> = if self.paths.is_empty() {
            (0..count as u8).collect()
        } else {
            self.paths.keys().copied().collect()
        };
        tags.into_iter().map(|p| Flow::new(self.source, dest, p)).collect()
    }

    /// Nodes that consume the stream.
    pub fn receivers(&self) -> Vec<NodeId> {
        match (&self.multicast_tree, self.destination) {
            (Some(pairs), _) => {
                let parents: BTreeSet<NodeId> = pairs.iter().map(|&(_, p)| p).collect();
                let mut leaves: Vec<NodeId> = pairs.iter().map(|&(c, _)| c).filter(|c| !parents.contains(c)).collect();
                leaves.sort();
                leaves.dedup();
                leaves
            }
            (None, Some(d)) => vec![d],
            (None, None) => Vec::new(),
        }
    }

    /// Per-packet pacing interval at the source.
    pub fn t_data(&self) -> SimTime {
        self.channel.t_data().unwrap_or(SimTime::ZERO)
    }

    /// Semantic checks shared by the parser and programmatic construction.
    pub fn validate(&self) -> Result<(), Vec<ConfigError>> {
        let mut errs = Vec::new();
        let mut err = |m: String| errs.push(ConfigError { line: 0, message: m });
        let declared: BTreeSet<NodeId> = self.nodes.iter().copied().collect();
        let check = |n: NodeId, what: &str, err: &mut dyn FnMut(String)| {
            if !declared.contains(&n) {
                err(format!("{what} references undeclared node {n}"));
            }
        };
        check(self.source, "flow.source", &mut err);
        if let Some(d) = self.destination {
            check(d, "flow.destination", &mut err);
        } else if self.multicast_tree.is_none() {
            err("flow.destination is required without multicast.tree".into());
        }
        for l in &self.links {
            check(l.a, "link", &mut err);
            check(l.b, "link", &mut err);
        }
        let linked: BTreeSet<(NodeId, NodeId)> = self.links.iter().map(|l| link_key(l.a, l.b)).collect();
        let all_routes = self.paths.iter().map(|(p, r)| (format!("path.{p}"), r)).chain(
            self.route_cache
                .iter()
                .flat_map(|(p, rs)| rs.iter().map(move |r| (format!("cache.{p}"), r))),
        );
        for (what, route) in all_routes {
            for &n in route {
                check(n, &what, &mut err);
            }
            if route.first() != Some(&self.source) || route.last() != self.destination.as_ref() {
                err(format!("{what} must run from flow.source to flow.destination"));
            }
            for w in route.windows(2) {
                if !linked.contains(&link_key(w[0], w[1])) {
                    err(format!("{what} uses {}-{} which is not a declared link", w[0], w[1]));
                }
            }
        }
        for d in &self.drops {
            check(d.from, "drop", &mut err);
            check(d.to, "drop", &mut err);
        }
        if let Some(o) = &self.oracle {
            if !linked.contains(&link_key(o.link.0, o.link.1)) {
                err(format!("oracle.link {}-{} is not a declared link", o.link.0, o.link.1));
            }
            if o.window.1 <= o.window.0 {
                err("oracle.fail_window is empty".into());
            }
        }
        if let Err(e) = self.channel.validate() {
            err(e.to_string());
        }
        if self.run.horizon == SimTime::ZERO {
            err("run.horizon must be positive".into());
        }
        if self.run.trials == 0 {
            err("run.trials must be at least 1".into());
        }
        if self.video.encoder.packets_per_frame == 0 {
            err("video.packets_per_frame must be at least 1".into());
        }
        if !(1..=2).contains(&self.video.encoder.descriptions) {
            err("video.descriptions must be 1 or 2".into());
        }
        if let Err(e) = self.topology() {
            err(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

pub fn parse_duration(s: &str) -> Result<SimTime, String> {
    let s = s.trim();
    if s == "inf" {
        return Ok(SimTime::NEVER);
    }
    let (num, scale) = if let Some(v) = s.strip_suffix("us") {
        (v, 1.0)
    } else if let Some(v) = s.strip_suffix("ms") {
        (v, 1e3)
    } else if let Some(v) = s.strip_suffix('s') {
        (v, 1e6)
    } else {
        (s, 1.0)
    };
    let v: f64 = num.trim().parse().map_err(|_| format!("bad duration '{s}'"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("duration '{s}' must be non-negative"));
    }
    Ok(SimTime((v * scale).round() as u64))
}

fn parse_node(s: &str) -> Result<NodeId, String> {
    s.trim()
        .parse::<u32>()
        .map(NodeId)
        .map_err(|_| format!("bad node id '{}'", s.trim()))
}

/// Whitespace or comma separated ids; `a..b` expands to `a, a+1, .., b-1`.
fn parse_node_list(s: &str) -> Result<Vec<NodeId>, String> {
    let mut out = Vec::new();
    for tok in s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
    {
        if let Some((a, b)) = tok.split_once("..") {
            let (a, b) = (parse_node(a)?, parse_node(b)?);
            out.extend((a.0..b.0).map(NodeId));
        } else {
            out.push(parse_node(tok)?);
        }
    }
    Ok(out)
}

fn parse_pair(s: &str, sep: char) -> Result<(NodeId, NodeId), String> {
    let (a, b) = s
        .split_once(sep)
        .ok_or_else(|| format!("expected A{sep}B, got '{s}'"))?;
    Ok((parse_node(a)?, parse_node(b)?))
}

fn parse_interval(s: &str) -> Result<(SimTime, SimTime), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected down..up, got '{}'", s.trim()))?;
    Ok((parse_duration(a)?, parse_duration(b)?))
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.trim().parse().map_err(|_| format!("bad number '{}'", s.trim()))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(format!("bad boolean '{other}'")),
    }
}

fn parse_path_tag(s: &str) -> Result<u8, String> {
    s.parse().map_err(|_| format!("bad path tag '{s}'"))
}

/// `kind from->to nth`, e.g. `ack 2->1 1`.
fn parse_drop(s: &str) -> Result<ForcedDrop, String> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    let [kind, dir, nth] = parts[..] else {
        return Err(format!("expected 'kind from->to nth', got '{s}'"));
    };
    let kind = PacketKind::parse(kind).ok_or_else(|| format!("unknown packet kind '{kind}'"))?;
    let (from, to) = {
        let (a, b) = dir
            .split_once("->")
            .ok_or_else(|| format!("expected from->to, got '{dir}'"))?;
        (parse_node(a)?, parse_node(b)?)
    };
    let nth: u32 = parse_num(nth)?;
    if nth == 0 {
        return Err("drop index is 1-based".into());
    }
    Ok(ForcedDrop { from, to, kind, nth })
}

/// Parse and validate a scenario; every problem found is reported.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, Vec<ConfigError>> {
    let mut cfg = ScenarioConfig::with_nodes([], 0, None);
    let mut errors: Vec<ConfigError> = Vec::new();
    let mut source_set = false;
    let mut link_lines: BTreeMap<(NodeId, NodeId), usize> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(ConfigError {
                line: line_no,
                message: format!("expected 'key = value', got '{line}'"),
            });
            continue;
        };
        let key = key.trim();
        let value = value.trim();
        let result: Result<(), String> = (|| {
            let parts: Vec<&str> = key.split('.').collect();
            match parts.as_slice() {
                ["scenario", "name"] => cfg.name = value.to_string(),
                ["topology", "nodes"] => cfg.nodes = parse_node_list(value)?,
                ["link", pair, field] => {
                    let (a, b) = parse_pair(pair, '-')?;
                    let k = link_key(a, b);
                    if let Entry::Vacant(e) = link_lines.entry(k) {
                        e.insert(line_no);
                        cfg.links.push(LinkSpec {
                            a,
                            b,
                            delay: SimTime::from_millis(1),
                            loss: 0.0,
                            failures: Vec::new(),
                        });
                    }
                    let spec = cfg
                        .links
                        .iter_mut()
                        .find(|l| link_key(l.a, l.b) == k)
                        .expect("inserted above");
                    match *field {
                        "delay" => spec.delay = parse_duration(value)?,
                        "loss" => {
                            let v: f64 = parse_num(value)?;
                            if !(0.0..=1.0).contains(&v) {
                                return Err(format!("loss {v} outside [0,1]"));
                            }
                            spec.loss = v;
                        }
                        "fail" => {
                            spec.failures = value
                                .split(',')
                                .filter(|s| !s.trim().is_empty())
                                .map(parse_interval)
                                .collect::<Result<_, _>>()?;
                        }
                        other => return Err(format!("unknown link field '{other}'")),
                    }
                }
                ["flow", "source"] => {
                    cfg.source = parse_node(value)?;
                    source_set = true;
                }
                ["flow", "destination"] => cfg.destination = Some(parse_node(value)?),
                ["path", tag] => {
                    cfg.paths.insert(parse_path_tag(tag)?, parse_node_list(value)?);
                }
                ["cache", tag] => {
                    let routes = value
                        .split(';')
                        .filter(|s| !s.trim().is_empty())
                        .map(parse_node_list)
                        .collect::<Result<_, _>>()?;
                    cfg.route_cache.insert(parse_path_tag(tag)?, routes);
                }
                ["multicast", "tree"] => {
                    let pairs = value
                        .split(|c: char| c.is_whitespace() || c == ',')
                        .filter(|t| !t.is_empty())
                        .map(|t| parse_pair(t, ':'))
                        .collect::<Result<_, _>>()?;
                    cfg.multicast_tree = Some(pairs);
                }
                ["channel", field] => match *field {
                    "payload_bits" => cfg.channel.payload_bits = parse_num(value)?,
                    "rate_bps" => {
                        let r: f64 = parse_num(value)?;
                        if r.is_nan() || r <= 0.0 {
                            return Err(format!("rate_bps must be positive, got {r}"));
                        }
                        cfg.channel.rate_bps = r;
                    }
                    "t_retrans" => cfg.channel.t_retrans = parse_duration(value)?,
                    "t_rerr" => cfg.channel.t_rerr = parse_duration(value)?,
                    "lambda_g" => cfg.channel.lambda_g = parse_num(value)?,
                    "lambda_f" => cfg.channel.lambda_f = parse_num(value)?,
                    "max_retries" => cfg.max_retries = parse_num(value)?,
                    "estimate_window" => cfg.estimate_window = parse_num(value)?,
                    other => return Err(format!("unknown key 'channel.{other}'")),
                },
                ["routing", field] => match *field {
                    "discovery_timeout" => cfg.discovery_timeout = parse_duration(value)?,
                    "rreq_retries" => cfg.rreq_retries = parse_num(value)?,
                    "discovery_backoff" => cfg.discovery_backoff = parse_duration(value)?,
                    other => return Err(format!("unknown key 'routing.{other}'")),
                },
                ["video", field] => match *field {
                    "frames" => cfg.video.frames = parse_num(value)?,
                    "packets_per_frame" => cfg.video.encoder.packets_per_frame = parse_num(value)?,
                    "threshold" => cfg.video.encoder.threshold = parse_num(value)?,
                    "frame_interval" => cfg.video.frame_interval = parse_duration(value)?,
                    "descriptions" => cfg.video.encoder.descriptions = parse_num(value)?,
                    "start" => cfg.video.start = parse_duration(value)?,
                    "ref_depth" => cfg.video.encoder.ref_depth = parse_num(value)?,
                    "cross_filter" => cfg.video.encoder.filter_cross = parse_bool(value)?,
                    other => return Err(format!("unknown key 'video.{other}'")),
                },
                ["run", field] => match *field {
                    "seed" => cfg.run.seed = parse_num(value)?,
                    "horizon" => cfg.run.horizon = parse_duration(value)?,
                    "trials" => cfg.run.trials = parse_num(value)?,
                    other => return Err(format!("unknown key 'run.{other}'")),
                },
                ["drop", _label] => cfg.drops.push(parse_drop(value)?),
                ["oracle", field] => {
                    let o = cfg.oracle.get_or_insert(OracleSpec {
                        link: (NodeId(0), NodeId(0)),
                        window: (SimTime::ZERO, SimTime::ZERO),
                        max_n: 8,
                    });
                    match *field {
                        "link" => o.link = parse_pair(value, '-')?,
                        "fail_window" => o.window = parse_interval(value)?,
                        "max_n" => o.max_n = parse_num(value)?,
                        other => return Err(format!("unknown key 'oracle.{other}'")),
                    }
                }
                _ => return Err(format!("unknown key '{key}'")),
            }
            Ok(())
        })();
        if let Err(message) = result {
            errors.push(ConfigError { line: line_no, message });
        }
    }

    if cfg.nodes.is_empty() {
        errors.push(ConfigError {
            line: 0,
            message: "topology.nodes is required".into(),
        });
    }
    if !source_set {
        errors.push(ConfigError {
            line: 0,
            message: "flow.source is required".into(),
        });
    }
    if let Err(mut sem) = cfg.validate() {
        // Attach the declaring line to link-level problems where possible.
        for e in &mut sem {
            for (&(a, b), &line) in &link_lines {
                if e.message.contains(&format!("{a}-{b}")) || e.message.contains(&format!("{b}-{a}")) {
                    e.line = line;
                }
            }
        }
        errors.extend(sem);
    }
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_two_node_config_gets_defaults() {
        let cfg = parse_config("topology.nodes = 0 1\nlink.0-1.delay = 2ms\nflow.source = 0\nflow.destination = 1\n")
            .unwrap();
        assert_eq!(cfg.links.len(), 1);
        assert_eq!(cfg.links[0].delay, SimTime::from_millis(2));
        assert_eq!(cfg.max_retries, 3);
        assert_eq!(cfg.channel.t_retrans, SimTime::from_millis(10));
        assert_eq!(cfg.run.trials, 1);
        assert_eq!(cfg.flows().len(), 2);
    }

    #[test]
    fn dangling_link_is_named() {
        let errs = parse_config("topology.nodes = 0 1\nlink.0-7.delay = 1ms\nflow.source = 0\nflow.destination = 1\n")
            .unwrap_err();
        assert!(errs.iter().any(|e| e.message.contains("undeclared node 7")), "{errs:?}");
    }

    #[test]
    fn lambda_f_below_lambda_g_rejected() {
        let errs = parse_config(
            "topology.nodes = 0 1\nlink.0-1.delay = 1ms\nflow.source = 0\nflow.destination = 1\nchannel.lambda_g = 0.5\nchannel.lambda_f = 0.2\n",
        )
        .unwrap_err();
        assert!(errs.iter().any(|e| e.message.contains("lambda")), "{errs:?}");
    }

    #[test]
    fn all_errors_reported_with_lines() {
        let errs = parse_config(
            "topology.nodes = 0 1\nbogus.key = 1\nchannel.rate_bps = -5\nlink.0-1.delay = soon\nflow.source = 0\nflow.destination = 1\n",
        )
        .unwrap_err();
        let lines: Vec<usize> = errs.iter().map(|e| e.line).collect();
        assert!(
            lines.contains(&2) && lines.contains(&3) && lines.contains(&4),
            "{errs:?}"
        );
    }

    #[test]
    fn durations_and_schedules() {
        assert_eq!(parse_duration("250").unwrap(), SimTime(250));
        assert_eq!(parse_duration("1.5ms").unwrap(), SimTime(1500));
        assert_eq!(parse_duration("2s").unwrap(), SimTime::from_secs(2));
        assert_eq!(parse_duration("inf").unwrap(), SimTime::NEVER);
        assert!(parse_duration("-1ms").is_err());
        let cfg = parse_config(
            "topology.nodes = 0..3\nlink.0-1.fail = 100ms..200ms, 300ms..inf\nlink.1-2.delay = 1ms\nflow.source = 0\nflow.destination = 2\npath.0 = 0 1 2\ndrop.a = ack 2->1 1\n",
        )
        .unwrap();
        assert_eq!(cfg.nodes.len(), 3);
        assert_eq!(cfg.links[0].failures.len(), 2);
        assert_eq!(cfg.links[0].failures[1].1, SimTime::NEVER);
        assert_eq!(cfg.drops[0].kind, PacketKind::Ack);
    }

    #[test]
    fn path_must_follow_links() {
        let errs = parse_config(
            "topology.nodes = 0..3\nlink.0-1.delay = 1ms\nflow.source = 0\nflow.destination = 2\npath.0 = 0 2\n",
        )
        .unwrap_err();
        assert!(
            errs.iter().any(|e| e.message.contains("not a declared link")),
            "{errs:?}"
        );
    }

    #[test]
    fn multicast_receivers_are_leaves() {
        let cfg = parse_config(
            "topology.nodes = 0..4\nlink.0-1.delay = 1ms\nlink.1-2.delay = 1ms\nlink.1-3.delay = 1ms\nflow.source = 0\nmulticast.tree = 1:0 2:1 3:1\n",
        )
        .unwrap();
        assert_eq!(cfg.receivers(), vec![NodeId(2), NodeId(3)]);
        assert!(cfg.flows()[0].is_multicast());
    }
}
