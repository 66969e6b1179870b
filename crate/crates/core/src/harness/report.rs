//! Machine-readable run report.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::netsim::SimTime;
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Complete,
    SafetyFailure,
    LivenessFailure,
}

impl Outcome {
    /// Process exit code for this outcome.
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Complete => 0,
            Outcome::SafetyFailure => 1,
            Outcome::LivenessFailure => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockStat {
    pub height: u64,
    pub proposer: NodeId,
    /// Committee version whose proposer gathered the acceptor majority.
    pub version_confirmed: u32,
    /// Version at which the block was first proposed; lower than
    /// `version_confirmed` when a later proposer adopted it.
    pub header_version: u32,
    /// One-way message phases on the causal path to the proposer's CONFIRM;
    /// `None` when the proposer's confirmation was not observed.
    pub message_phase_count: Option<usize>,
    pub phases: Vec<&'static str>,
    pub hops: Option<usize>,
    pub messages_total: u64,
    /// Part of the registration prefix rather than the measured run.
    pub bootstrap: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MessageStats {
    pub sent: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub delivered: u64,
    pub decode_errors: u64,
    pub per_kind: BTreeMap<&'static str, u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PartitionResult {
    pub start_ms: SimTime,
    pub end_ms: SimTime,
    pub confirmations_during: usize,
    /// Confirmations inside the window whose acceptor majority spanned
    /// groups.
    pub confirmations_without_group_majority: usize,
    pub first_confirmation_after_heal_ms: Option<SimTime>,
    /// Run finished before the window closed.
    pub finished_before_heal: bool,
    pub healed_in_time: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Oracles {
    pub no_fork: bool,
    pub no_safety_violation: bool,
    pub unique_proposer: bool,
    pub liveness: bool,
    pub partition_stall: bool,
}

impl Oracles {
    pub fn all_pass(&self) -> bool {
        self.no_fork && self.no_safety_violation && self.unique_proposer && self.liveness && self.partition_stall
    }

    pub fn safety_pass(&self) -> bool {
        self.no_fork && self.no_safety_violation && self.unique_proposer && self.partition_stall
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub outcome: Outcome,
    /// Measured blocks confirmed by every online node.
    pub blocks_confirmed: u64,
    pub bootstrap_blocks: u64,
    pub head_height: u64,
    pub fork_count: usize,
    pub first_divergent_height: Option<u64>,
    /// Measured blocks proposed, indexed by node.
    pub proposer_counts: Vec<u64>,
    pub blocks: Vec<BlockStat>,
    pub event_count: u64,
    pub sim_time_ms: SimTime,
    pub messages: MessageStats,
    /// `(height, version)` pairs with more than one winner.
    pub duplicate_winners: Vec<(u64, u32)>,
    pub safety_violations: usize,
    pub partitions: Vec<PartitionResult>,
    pub oracles: Oracles,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary_line(&self) -> String {
        let max_version = self.blocks.iter().filter(|b| !b.bootstrap).map(|b| b.version_confirmed).max();
        format!(
            "{} seed={} outcome={:?} blocks={} forks={} max_version={} events={} sent={}",
            self.scenario,
            self.seed,
            self.outcome,
            self.blocks_confirmed,
            self.fork_count,
            max_version.map_or("-".to_string(), |v| v.to_string()),
            self.event_count,
            self.messages.sent
        )
    }
}
