//! Scenario files: flat `key = value` lines, `#` comments, lists as
//! comma-separated tuples.
//!
//! ```text
//! node_count = 50
//! committee_size = 7
//! acceptor_count = 9
//! blocks_target = 30
//! drop_rate = 0.2
//! offline = (3, 1000, 5000), (4, 2000, 9000)
//! offline_rotation = (0.3, 20000, 5000, 400000)
//! partitions = (0..25 | 25..50, 20000, 65000)
//! join_schedule = (10, 3), (10, 30)
//! no_renew = 10
//! ```
//!
//! Partition groups are separated by `|`; a group is a `+`-joined list of
//! node ids and half-open ranges.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::chain::Params;
use crate::consensus::AcceptorRule;
use crate::hash::SeedStream;
use crate::netsim::{FaultSchedule, Latency, OfflineWindow, PartitionWindow, SimTime};
use crate::tee::ProviderKind;
use crate::NodeId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{key}` on line {line}")]
    UnknownKey { line: usize, key: String },
    #[error("duplicate key `{key}` on line {line}")]
    DuplicateKey { line: usize, key: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Periodic offline windows: in each window a fresh seeded sample of
/// `fraction * node_count` nodes is offline.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineRotation {
    pub fraction: f64,
    pub window_ms: SimTime,
    pub start_ms: SimTime,
    pub end_ms: SimTime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub node_count: u32,
    pub committee_size: u32,
    pub acceptor_count: u32,
    pub blocks_target: u64,
    pub seed: u64,
    pub latency_base_ms: u64,
    pub latency_jitter_ms: u64,
    pub drop_rate: f64,
    pub duplicate_rate: f64,
    pub timeout_ms: u64,
    pub membership_lifetime: u64,
    pub offline: Vec<OfflineWindow>,
    pub offline_rotation: Option<OfflineRotation>,
    pub partitions: Vec<PartitionWindow>,
    /// `(node, head)`: the node seeks membership once it confirms `head`.
    /// Nodes listed here do not join at start.
    pub join_schedule: Vec<(NodeId, u64)>,
    pub no_renew: BTreeSet<NodeId>,
    pub crypto: ProviderKind,
    pub acceptor_rule: AcceptorRule,
    pub payload_bytes: usize,
    pub max_events: u64,
    pub max_time_ms: SimTime,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            node_count: 50,
            committee_size: 7,
            acceptor_count: 9,
            blocks_target: 30,
            seed: 1,
            latency_base_ms: 200,
            latency_jitter_ms: 0,
            drop_rate: 0.0,
            duplicate_rate: 0.0,
            timeout_ms: 15_000,
            membership_lifetime: 1000,
            offline: Vec::new(),
            offline_rotation: None,
            partitions: Vec::new(),
            join_schedule: Vec::new(),
            no_renew: BTreeSet::new(),
            crypto: ProviderKind::Stub,
            acceptor_rule: AcceptorRule::PromiseOnLearn,
            payload_bytes: 32,
            max_events: 20_000_000,
            max_time_ms: 48 * 3600 * 1000,
        }
    }
}

impl Scenario {
    pub fn params(&self) -> Params {
        Params {
            committee_size: self.committee_size,
            acceptor_count: self.acceptor_count,
            timeout_ms: self.timeout_ms,
            membership_lifetime: self.membership_lifetime,
        }
    }

    /// Nodes that join at start (all but those with a join schedule).
    pub fn initial_nodes(&self) -> Vec<NodeId> {
        let late: BTreeSet<NodeId> = self.join_schedule.iter().map(|(n, _)| *n).collect();
        (0..self.node_count).filter(|n| !late.contains(n)).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.node_count == 0 {
            return bad("node_count must be positive".into());
        }
        if self.committee_size == 0 || self.committee_size > self.node_count {
            return bad(format!("committee_size must be in 1..={}", self.node_count));
        }
        if self.acceptor_count == 0 || self.acceptor_count > self.node_count {
            return bad(format!("acceptor_count must be in 1..={}", self.node_count));
        }
        if self.blocks_target == 0 {
            return bad("blocks_target must be at least 1".into());
        }
        if self.timeout_ms == 0 || self.membership_lifetime == 0 {
            return bad("timeout_ms and membership_lifetime must be positive".into());
        }
        let in_range = |n: NodeId| n < self.node_count;
        if let Some(n) = self
            .offline
            .iter()
            .map(|w| w.node)
            .chain(self.partitions.iter().flat_map(|p| p.groups.iter().flatten().copied()))
            .chain(self.join_schedule.iter().map(|(n, _)| *n))
            .chain(self.no_renew.iter().copied())
            .find(|n| !in_range(*n))
        {
            return bad(format!("node {n} out of range"));
        }
        if self.join_schedule.iter().any(|(n, _)| *n == 0) {
            return bad("node 0 founds the chain and cannot be scheduled to join".into());
        }
        if let Some(r) = &self.offline_rotation {
            if !(0.0..=1.0).contains(&r.fraction) || r.window_ms == 0 {
                return bad("offline_rotation needs fraction in [0,1] and a positive window".into());
            }
        }
        self.faults().validate().map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    /// Concrete fault schedule, with the offline rotation expanded.
    pub fn faults(&self) -> FaultSchedule {
        let mut offline = self.offline.clone();
        if let Some(rot) = &self.offline_rotation {
            let k = (rot.fraction * self.node_count as f64).round() as usize;
            let mut stream = SeedStream::new(self.seed ^ 0x006f_6666_6c69_6e65);
            let mut t = rot.start_ms;
            while t < rot.end_ms {
                let end = (t + rot.window_ms).min(rot.end_ms);
                let mut pool: Vec<NodeId> = (0..self.node_count).collect();
                for i in 0..k.min(pool.len()) {
                    let j = i + stream.below((pool.len() - i) as u64) as usize;
                    pool.swap(i, j);
                    offline.push(OfflineWindow {
                        node: pool[i],
                        start_ms: t,
                        end_ms: end,
                    });
                }
                t = end;
            }
        }
        FaultSchedule {
            drop_rate: self.drop_rate,
            duplicate_rate: self.duplicate_rate,
            latency: Latency {
                base_ms: self.latency_base_ms,
                jitter_ms: self.latency_jitter_ms,
            },
            offline,
            partitions: self.partitions.clone(),
        }
    }

    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut s = Scenario::default();
        let mut seen = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ScenarioError::Syntax {
                line,
                msg: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), line).is_some() {
                return Err(ScenarioError::DuplicateKey { line, key: key.into() });
            }
            let err = |msg: String| ScenarioError::Syntax { line, msg };
            match key {
                "name" => s.name = value.to_string(),
                "node_count" => s.node_count = num(value).map_err(err)?,
                "committee_size" => s.committee_size = num(value).map_err(err)?,
                "acceptor_count" => s.acceptor_count = num(value).map_err(err)?,
                "blocks_target" => s.blocks_target = num(value).map_err(err)?,
                "seed" => s.seed = num(value).map_err(err)?,
                "latency_base_ms" => s.latency_base_ms = num(value).map_err(err)?,
                "latency_jitter_ms" => s.latency_jitter_ms = num(value).map_err(err)?,
                "drop_rate" => s.drop_rate = num(value).map_err(err)?,
                "duplicate_rate" => s.duplicate_rate = num(value).map_err(err)?,
                "timeout_ms" => s.timeout_ms = num(value).map_err(err)?,
                "membership_lifetime" => s.membership_lifetime = num(value).map_err(err)?,
                "payload_bytes" => s.payload_bytes = num(value).map_err(err)?,
                "max_events" => s.max_events = num(value).map_err(err)?,
                "max_time_ms" => s.max_time_ms = num(value).map_err(err)?,
                "crypto" => {
                    s.crypto = ProviderKind::parse(value).ok_or_else(|| err(format!("unknown crypto provider `{value}`")))?
                }
                "acceptor_rule" => {
                    s.acceptor_rule = match value {
                        "promise-on-learn" => AcceptorRule::PromiseOnLearn,
                        "literal" => AcceptorRule::Literal,
                        _ => return Err(err(format!("unknown acceptor rule `{value}`"))),
                    }
                }
                "offline" => {
                    s.offline = tuples(value)
                        .map_err(err)?
                        .into_iter()
                        .map(|t| {
                            let [node, start_ms, end_ms] = fields::<3>(&t)?;
                            Ok(OfflineWindow {
                                node: num(node)?,
                                start_ms: num(start_ms)?,
                                end_ms: num(end_ms)?,
                            })
                        })
                        .collect::<Result<_, String>>()
                        .map_err(err)?
                }
                "offline_rotation" => {
                    let ts = tuples(value).map_err(err)?;
                    let [t] = ts.as_slice() else {
                        return Err(err("offline_rotation takes one tuple".into()));
                    };
                    let [fraction, window, start, end] = fields::<4>(t).map_err(err)?;
                    s.offline_rotation = Some(OfflineRotation {
                        fraction: num(fraction).map_err(err)?,
                        window_ms: num(window).map_err(err)?,
                        start_ms: num(start).map_err(err)?,
                        end_ms: num(end).map_err(err)?,
                    });
                }
                "partitions" => {
                    s.partitions = tuples(value)
                        .map_err(err)?
                        .into_iter()
                        .map(|t| {
                            let [groups, start_ms, end_ms] = fields::<3>(&t)?;
                            Ok(PartitionWindow {
                                groups: parse_groups(groups)?,
                                start_ms: num(start_ms)?,
                                end_ms: num(end_ms)?,
                            })
                        })
                        .collect::<Result<_, String>>()
                        .map_err(err)?
                }
                "join_schedule" => {
                    s.join_schedule = tuples(value)
                        .map_err(err)?
                        .into_iter()
                        .map(|t| {
                            let [node, head] = fields::<2>(&t)?;
                            Ok((num(node)?, num(head)?))
                        })
                        .collect::<Result<_, String>>()
                        .map_err(err)?
                }
                "no_renew" => {
                    s.no_renew = value
                        .split(',')
                        .map(str::trim)
                        .filter(|v| !v.is_empty())
                        .map(num)
                        .collect::<Result<_, String>>()
                        .map_err(err)?
                }
                _ => return Err(ScenarioError::UnknownKey { line, key: key.into() }),
            }
        }
        s.validate()?;
        Ok(s)
    }
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    let t = s.trim().replace('_', "");
    t.parse().map_err(|_| format!("`{}` is not a valid number", s.trim()))
}

/// Split `(a, b), (c, d)` into tuple bodies.
fn tuples(value: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut rest = value.trim();
    while !rest.is_empty() {
        let body = rest
            .strip_prefix('(')
            .ok_or_else(|| format!("expected `(` at `{rest}`"))?;
        let close = body.find(')').ok_or("unclosed `(`")?;
        out.push(body[..close].to_string());
        rest = body[close + 1..].trim_start();
        if let Some(r) = rest.strip_prefix(',') {
            rest = r.trim_start();
            if rest.is_empty() {
                return Err("trailing comma".into());
            }
        } else if !rest.is_empty() {
            return Err(format!("expected `,` at `{rest}`"));
        }
    }
    Ok(out)
}

fn fields<const N: usize>(tuple: &str) -> Result<[&str; N], String> {
    let parts: Vec<&str> = tuple.split(',').map(str::trim).collect();
    parts
        .try_into()
        .map_err(|p: Vec<&str>| format!("expected {N} fields, found {}", p.len()))
}

fn parse_groups(spec: &str) -> Result<Vec<Vec<NodeId>>, String> {
    spec.split('|')
        .map(|group| {
            let mut nodes = Vec::new();
            for item in group.split('+').map(str::trim) {
                match item.split_once("..") {
                    Some((a, b)) => {
                        let (a, b): (NodeId, NodeId) = (num(a)?, num(b)?);
                        if a >= b {
                            return Err(format!("empty range `{item}`"));
                        }
                        nodes.extend(a..b);
                    }
                    None => nodes.push(num(item)?),
                }
            }
            Ok(nodes)
        })
        .collect()
}
