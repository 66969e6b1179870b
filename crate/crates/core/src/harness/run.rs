//! Drive one scenario to completion and evaluate the oracles.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use thiserror::Error;

use crate::chain::{fork_oracle_stores, make_genesis, ChainStore, GenesisError};
use crate::hash::Hash;
use crate::netsim::{render_log, FaultError, SimTime, Simulation, Trace};
use crate::node::{Directory, Node, NodeConfig, Observation};
use crate::sortition::CommitteeSpec;
use crate::tee::{PublicKey, TeeError, TeePlatform};
use crate::NodeId;

use super::report::{BlockStat, MessageStats, Oracles, Outcome, PartitionResult, RunReport};
use super::scenario::{Scenario, ScenarioError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Genesis(#[from] GenesisError),
    #[error(transparent)]
    Tee(#[from] TeeError),
}

/// Everything a finished run leaves behind.
pub struct RunOutcome {
    pub report: RunReport,
    /// Delivered-message log, when requested.
    pub event_log: Option<String>,
    /// Dump of the longest confirmed chain.
    pub chain_dump: String,
    /// Every committee any node derived, one entry per `(height, version)`.
    pub committees: Vec<CommitteeSpec>,
    /// `(height, version)` pairs for which nodes derived different committees.
    pub committee_disagreements: usize,
    pub nodes: Vec<Node>,
}

#[derive(Default)]
struct Tally {
    winners: BTreeMap<(u64, u32), BTreeSet<NodeId>>,
    /// Proposer-side confirmations: height to `(time, hash, version, trace)`.
    confirmations: BTreeMap<u64, Vec<(SimTime, Hash, u32, Trace)>>,
    safety_violations: usize,
}

impl Tally {
    fn absorb(&mut self, time: SimTime, node: NodeId, obs: &Observation) {
        match obs {
            Observation::Won { height, version } => {
                self.winners.entry((*height, *version)).or_default().insert(node);
            }
            Observation::ProposalConfirmed { height, version, hash, trace } => {
                let list = self.confirmations.entry(*height).or_default();
                if list.iter().any(|(_, h, _, _)| h != hash) {
                    self.safety_violations += 1;
                }
                list.push((time, *hash, *version, trace.clone()));
            }
            Observation::SafetyViolation { .. } | Observation::Fork { .. } => self.safety_violations += 1,
            Observation::Applied { .. } => {}
        }
    }
}

/// Build the platform, genesis and nodes for `scn`.
pub fn build(scn: &Scenario, keep_log: bool) -> Result<Simulation<Node>, RunError> {
    scn.validate()?;
    let mut platform = TeePlatform::new(scn.seed, scn.crypto);
    let mut enclaves = (0..scn.node_count)
        .map(|i| platform.create_enclave(i))
        .collect::<Result<Vec<_>, _>>()?;
    enclaves[0].install_credential(platform.issue_credential());
    let genesis = make_genesis(&mut enclaves[0], scn.params())?;
    let directory = Rc::new(Directory::new(
        enclaves.iter().enumerate().map(|(i, e)| (e.public_key(), i as NodeId)),
    ));
    let triggers: BTreeMap<NodeId, BTreeSet<u64>> =
        scn.join_schedule.iter().fold(BTreeMap::new(), |mut m, (n, h)| {
            m.entry(*n).or_default().insert(*h);
            m
        });
    let nodes = enclaves
        .into_iter()
        .enumerate()
        .map(|(i, enclave)| {
            let id = i as NodeId;
            let join_triggers = triggers.get(&id).cloned().unwrap_or_default();
            let cfg = NodeConfig {
                acceptor_rule: scn.acceptor_rule,
                join_at_start: join_triggers.is_empty(),
                renew: !scn.no_renew.contains(&id),
                join_triggers,
                payload_bytes: scn.payload_bytes,
                ..NodeConfig::default()
            };
            Node::new(id, enclave, ChainStore::new(genesis.clone()), directory.clone(), cfg)
        })
        .collect();
    let mut sim = Simulation::new(nodes, scn.faults(), scn.seed, keep_log)?;
    for i in 0..scn.node_count {
        sim.invoke(i, |n, c| n.start(c));
    }
    Ok(sim)
}

/// First height at which every initial node is an active member.
fn bootstrap_end(node: &Node, initial: &[PublicKey]) -> Option<u64> {
    let ledger = node.ledger();
    let mut end = 1;
    for pk in initial {
        end = end.max(ledger.record(pk)?.join_height + 1);
    }
    Some(end)
}

fn online_heads(sim: &Simulation<Node>) -> impl Iterator<Item = u64> + '_ {
    sim.nodes()
        .iter()
        .filter(|n| !sim.is_offline(n.id()) && !n.is_halted())
        .map(|n| n.store().head_height())
}

pub fn run(scn: &Scenario, keep_log: bool) -> Result<RunOutcome, RunError> {
    let mut sim = build(scn, keep_log)?;
    let initial: Vec<PublicKey> = scn
        .initial_nodes()
        .into_iter()
        .map(|i| sim.node(i).public_key())
        .collect();

    let mut tally = Tally::default();
    let mut seen = 0;
    let mut b0: Option<u64> = None;
    let mut complete = false;
    loop {
        if sim.stats().events >= scn.max_events || sim.now() > scn.max_time_ms || !sim.step() {
            break;
        }
        let obs = sim.observations();
        if obs.len() == seen {
            continue;
        }
        let mut applied = false;
        for (t, node, o) in &obs[seen..] {
            tally.absorb(*t, *node, o);
            if let Observation::Applied { .. } = o {
                applied = true;
                if b0.is_none() {
                    b0 = bootstrap_end(sim.node(*node), &initial);
                }
            }
        }
        seen = obs.len();
        if let (true, Some(b0)) = (applied, b0) {
            let target = b0 + scn.blocks_target - 1;
            if online_heads(&sim).all(|h| h >= target) {
                complete = true;
                break;
            }
        }
    }
    Ok(finish(scn, sim, tally, b0, complete))
}

fn finish(scn: &Scenario, sim: Simulation<Node>, tally: Tally, b0: Option<u64>, complete: bool) -> RunOutcome {
    let nodes = sim.nodes();
    let stores: Vec<&ChainStore> = nodes.iter().map(|n| n.store()).collect();
    let forks = fork_oracle_stores(&stores);
    let longest = stores
        .iter()
        .copied()
        .max_by_key(|s| s.head_height())
        .expect("at least one node");
    let directory: BTreeMap<PublicKey, NodeId> = nodes.iter().map(|n| (n.public_key(), n.id())).collect();

    let b0_or_never = b0.unwrap_or(u64::MAX);
    let target = b0.map_or(0, |b| b + scn.blocks_target - 1);
    let min_head = online_heads(&sim).min().unwrap_or(0);
    let blocks_confirmed = match b0 {
        Some(b) => min_head.min(target).saturating_sub(b - 1),
        None => 0,
    };

    let mut proposer_counts = vec![0u64; nodes.len()];
    let mut blocks = Vec::new();
    for block in longest.blocks() {
        let h = block.height();
        let hash = block.hash();
        let proposer = directory.get(&block.header.proposer_pk).copied().unwrap_or(NodeId::MAX);
        let bootstrap = h < b0_or_never;
        if !bootstrap && h <= target {
            if let Some(c) = proposer_counts.get_mut(proposer as usize) {
                *c += 1;
            }
        }
        let confirmation = tally
            .confirmations
            .get(&h)
            .and_then(|l| l.iter().find(|(_, x, _, _)| *x == hash));
        let trace = confirmation.map(|(_, _, _, t)| t);
        let phases = trace.map(|t| t.phases()).unwrap_or_default();
        blocks.push(BlockStat {
            height: h,
            proposer,
            version_confirmed: confirmation.map_or(block.header.committee_version, |(_, _, v, _)| *v),
            header_version: block.header.committee_version,
            message_phase_count: trace.map(|_| phases.len()),
            phases: phases.iter().map(|k| k.name()).collect(),
            hops: trace.map(|t| t.hops().len()),
            messages_total: sim.stats().sent_per_height.get(&h).copied().unwrap_or(0),
            bootstrap,
        });
    }

    let duplicate_winners: Vec<(u64, u32)> = tally
        .winners
        .iter()
        .filter(|(_, w)| w.len() > 1)
        .map(|(k, _)| *k)
        .collect();

    let partitions = partition_results(scn, &sim, &tally, complete);
    let oracles = Oracles {
        no_fork: forks.fork_count == 0,
        no_safety_violation: tally.safety_violations == 0,
        unique_proposer: duplicate_winners.is_empty(),
        liveness: complete,
        partition_stall: partitions
            .iter()
            .all(|p| p.confirmations_without_group_majority == 0 && p.healed_in_time),
    };
    let outcome = if !oracles.safety_pass() {
        Outcome::SafetyFailure
    } else if !complete {
        Outcome::LivenessFailure
    } else {
        Outcome::Complete
    };

    let stats = sim.stats();
    let report = RunReport {
        scenario: scn.name.clone(),
        seed: scn.seed,
        outcome,
        blocks_confirmed,
        bootstrap_blocks: b0.map_or(longest.head_height(), |b| b - 1),
        head_height: longest.head_height(),
        fork_count: forks.fork_count,
        first_divergent_height: forks.first_divergent_height,
        proposer_counts,
        blocks,
        event_count: stats.events,
        sim_time_ms: sim.now(),
        messages: MessageStats {
            sent: stats.sent,
            dropped: stats.dropped,
            duplicated: stats.duplicated,
            delivered: stats.delivered,
            decode_errors: stats.decode_errors,
            per_kind: stats.sent_per_kind.iter().map(|(k, v)| (k.name(), *v)).collect(),
        },
        duplicate_winners,
        safety_violations: tally.safety_violations,
        partitions,
        oracles,
    };

    let mut committees: BTreeMap<(u64, u32), CommitteeSpec> = BTreeMap::new();
    let mut disagreements = BTreeSet::new();
    for spec in nodes.iter().flat_map(|n| n.committee_log()) {
        match committees.get(&(spec.height, spec.version)) {
            Some(prev) if prev != spec => {
                disagreements.insert((spec.height, spec.version));
            }
            Some(_) => {}
            None => {
                committees.insert((spec.height, spec.version), spec.clone());
            }
        }
    }

    RunOutcome {
        report,
        event_log: sim.log().map(render_log),
        chain_dump: longest.dump(),
        committees: committees.into_values().collect(),
        committee_disagreements: disagreements.len(),
        nodes: sim.into_nodes(),
    }
}

/// Acceptor node ids per height, as the nodes' own probes found them.
pub fn acceptors_by_height(nodes: &[Node]) -> BTreeMap<u64, BTreeSet<NodeId>> {
    let mut map: BTreeMap<u64, BTreeSet<NodeId>> = BTreeMap::new();
    for n in nodes {
        for h in n.acceptor_heights() {
            map.entry(*h).or_default().insert(n.id());
        }
    }
    map
}

fn partition_results(scn: &Scenario, sim: &Simulation<Node>, tally: &Tally, complete: bool) -> Vec<PartitionResult> {
    let acceptors = acceptors_by_height(sim.nodes());
    let heal_budget = 3 * scn.timeout_ms;
    sim.faults()
        .partitions
        .iter()
        .map(|w| {
            let mut during = 0;
            let mut spanning = 0;
            let mut after: Option<SimTime> = None;
            for (h, list) in &tally.confirmations {
                for (t, _, _, _) in list {
                    if w.active(*t) {
                        during += 1;
                        let set = acceptors.get(h).cloned().unwrap_or_default();
                        let mut per_group: BTreeMap<Option<usize>, usize> = BTreeMap::new();
                        for a in &set {
                            *per_group.entry(w.group_of(*a)).or_default() += 1;
                        }
                        if !per_group.values().any(|c| 2 * c > set.len()) {
                            spanning += 1;
                        }
                    } else if *t >= w.end_ms {
                        after = Some(after.map_or(*t, |a| a.min(*t)));
                    }
                }
            }
            let finished_before_heal = complete && sim.now() < w.end_ms;
            let healed_in_time = finished_before_heal || after.is_some_and(|t| t - w.end_ms <= heal_budget);
            PartitionResult {
                start_ms: w.start_ms,
                end_ms: w.end_ms,
                confirmations_during: during,
                confirmations_without_group_majority: spanning,
                first_confirmation_after_heal_ms: after,
                finished_before_heal,
                healed_in_time,
            }
        })
        .collect()
}

