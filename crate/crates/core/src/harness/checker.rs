//! Exhaustive schedule exploration over tiny instances.
//!
//! The consensus check drives the real acceptor, learner and proposal state
//! machines with small block ids. Every in-flight message may be delivered
//! next or dropped; identical states reached along different schedules are
//! explored once. A state is a violation when two distinct blocks have been
//! confirmed.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use crate::consensus::{learn, AcceptorRule, AcceptorState, LearnOutcome, LearnReply, LearnStart, Learner, Proposal};
use crate::election::{ElectionState, VoteEffect};
use crate::tee::PublicKey;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckConfig {
    pub acceptors: usize,
    /// Competing proposers, at versions `1..=versions`.
    pub versions: u32,
    /// Version whose proposer proposes its own block without learning.
    pub skip_learn: Option<u32>,
    pub rule: AcceptorRule,
}

impl CheckConfig {
    pub fn new(acceptors: usize, versions: u32) -> Self {
        CheckConfig {
            acceptors,
            versions,
            skip_learn: None,
            rule: AcceptorRule::PromiseOnLearn,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CheckReport {
    pub acceptors: usize,
    pub versions: u32,
    /// Distinct states visited.
    pub states: u64,
    /// Complete schedules (root-to-leaf paths), saturating.
    pub schedules: u128,
    /// Distinct states holding two confirmed blocks.
    pub violations: u64,
    /// Distinct states in which a learner refused conflicting reports.
    pub halts: u64,
    /// Steps leading to the first violation found.
    pub counterexample: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Msg {
    Learn { p: u8, a: u8 },
    Reply { p: u8, a: u8, notify: Option<(u8, u32)> },
    Propose { p: u8, a: u8, block: u8 },
    Vote { p: u8, a: u8 },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Phase {
    Learning(Learner<u8>),
    Proposing(Proposal<u8>),
    Halted,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct State {
    acceptors: Vec<AcceptorState<u8>>,
    proposers: Vec<Phase>,
    inflight: Vec<Msg>,
    confirmed: BTreeSet<u8>,
}

fn version_of(p: u8) -> u32 {
    p as u32 + 1
}

impl State {
    fn initial(cfg: &CheckConfig) -> State {
        let k = cfg.acceptors;
        let mut inflight = Vec::new();
        let proposers = (0..cfg.versions as u8)
            .map(|p| {
                let v = version_of(p);
                if cfg.skip_learn == Some(v) {
                    inflight.extend((0..k as u8).map(|a| Msg::Propose { p, a, block: v as u8 }));
                    Phase::Proposing(Proposal::new(v as u8, v, k))
                } else {
                    inflight.extend((0..k as u8).map(|a| Msg::Learn { p, a }));
                    match learn::<u8>(1, v, k) {
                        LearnStart::Collect(l) => Phase::Learning(l),
                        LearnStart::Immediate => unreachable!("versions start at 1"),
                    }
                }
            })
            .collect();
        inflight.sort();
        State {
            acceptors: (0..k).map(|_| AcceptorState::with_rule(1, cfg.rule)).collect(),
            proposers,
            inflight,
            confirmed: BTreeSet::new(),
        }
    }

    fn is_violation(&self) -> bool {
        self.confirmed.len() > 1
    }

    fn is_halted(&self) -> bool {
        self.proposers.iter().any(|p| matches!(p, Phase::Halted))
    }

    fn deliver(&self, i: usize, k: usize) -> State {
        let mut s = self.clone();
        let msg = s.inflight.remove(i);
        match msg {
            Msg::Learn { p, a } => {
                let notify = match s.acceptors[a as usize].on_learn(version_of(p)) {
                    LearnReply::Empty => None,
                    LearnReply::Notify { block, version } => Some((block, version)),
                };
                s.inflight.push(Msg::Reply { p, a, notify });
            }
            Msg::Reply { p, a, notify } => {
                if let Phase::Learning(l) = &mut s.proposers[p as usize] {
                    let reply = match notify {
                        None => LearnReply::Empty,
                        Some((block, version)) => LearnReply::Notify { block, version },
                    };
                    match l.on_reply(a as usize, reply) {
                        Ok(None) => {}
                        Ok(Some(outcome)) => {
                            let v = version_of(p);
                            let block = match outcome {
                                LearnOutcome::Fresh => v as u8,
                                LearnOutcome::Adopt(b) => b,
                            };
                            s.proposers[p as usize] = Phase::Proposing(Proposal::new(block, v, k));
                            s.inflight.extend((0..k as u8).map(|a| Msg::Propose { p, a, block }));
                        }
                        Err(_) => s.proposers[p as usize] = Phase::Halted,
                    }
                }
            }
            Msg::Propose { p, a, block } => {
                if s.acceptors[a as usize].on_propose(&block, version_of(p)) {
                    s.inflight.push(Msg::Vote { p, a });
                }
            }
            Msg::Vote { p, a } => {
                if let Phase::Proposing(prop) = &mut s.proposers[p as usize] {
                    if prop.on_vote(a as usize) {
                        s.confirmed.insert(prop.block);
                    }
                }
            }
        }
        s.prune();
        s
    }

    /// Discard messages whose delivery can no longer change anything, so
    /// that equivalent states coincide.
    fn prune(&mut self) {
        let proposers = &self.proposers;
        self.inflight.retain(|m| match m {
            Msg::Reply { p, .. } => matches!(proposers[*p as usize], Phase::Learning(_)),
            Msg::Vote { p, .. } => {
                matches!(&proposers[*p as usize], Phase::Proposing(prop) if !prop.is_confirmed())
            }
            _ => true,
        });
        self.inflight.sort();
    }

    fn drop_msg(&self, i: usize) -> State {
        let mut s = self.clone();
        s.inflight.remove(i);
        s
    }
}

struct Explorer<S> {
    memo: HashMap<S, u128>,
    path: Vec<(bool, Msg)>,
    violations: u64,
    halts: u64,
    counterexample: Option<Vec<String>>,
}

impl<S> Explorer<S> {
    fn new() -> Self {
        Explorer {
            memo: HashMap::new(),
            path: Vec::new(),
            violations: 0,
            halts: 0,
            counterexample: None,
        }
    }
}

impl Explorer<State> {
    fn explore(&mut self, s: State, k: usize) -> u128 {
        if let Some(n) = self.memo.get(&s) {
            return *n;
        }
        if s.is_halted() {
            self.halts += 1;
        }
        let paths = if s.is_violation() {
            self.violations += 1;
            if self.counterexample.is_none() {
                self.counterexample = Some(
                    self.path
                        .iter()
                        .map(|(delivered, m)| format!("{} {m:?}", if *delivered { "deliver" } else { "drop" }))
                        .collect(),
                );
            }
            1
        } else if s.inflight.is_empty() {
            1
        } else {
            let mut total: u128 = 0;
            for i in 0..s.inflight.len() {
                if i > 0 && s.inflight[i] == s.inflight[i - 1] {
                    continue;
                }
                self.path.push((true, s.inflight[i].clone()));
                total = total.saturating_add(self.explore(s.deliver(i, k), k));
                self.path.pop();
                self.path.push((false, s.inflight[i].clone()));
                total = total.saturating_add(self.explore(s.drop_msg(i), k));
                self.path.pop();
            }
            total
        };
        self.memo.insert(s, paths);
        paths
    }
}

/// Explore every delivery and drop order of one height's confirmation
/// protocol with competing proposers.
pub fn check_consensus(cfg: &CheckConfig) -> CheckReport {
    let mut ex = Explorer::new();
    let schedules = ex.explore(State::initial(cfg), cfg.acceptors);
    CheckReport {
        acceptors: cfg.acceptors,
        versions: cfg.versions,
        states: ex.memo.len() as u64,
        schedules,
        violations: ex.violations,
        halts: ex.halts,
        counterexample: ex.counterexample,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum EMsg {
    Start { who: u8 },
    Elect { from: u8, to: u8 },
    Vote { to: u8, tokens: Vec<PublicKey> },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct EState {
    members: Vec<ElectionState>,
    inflight: Vec<EMsg>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ElectionCheckReport {
    pub committee_size: usize,
    /// Random-number assignments tried, ties included.
    pub assignments: usize,
    pub states: u64,
    pub schedules: u128,
    /// States with two or more winners.
    pub multiple_winners: u64,
    /// States in which some token is held or in flight twice.
    pub token_duplications: u64,
}

fn member_pk(i: u8) -> PublicKey {
    PublicKey([i + 1; 32])
}

fn index_of(pk: &PublicKey) -> u8 {
    pk.0[0] - 1
}

impl EState {
    fn deliver(&self, i: usize, rs: &[u64]) -> EState {
        let mut s = self.clone();
        let msg = s.inflight.remove(i);
        match msg {
            EMsg::Start { who } => {
                if s.members[who as usize].start(|| rs[who as usize]).is_some() {
                    for to in 0..s.members.len() as u8 {
                        if to != who {
                            s.inflight.push(EMsg::Elect { from: who, to });
                        }
                    }
                }
            }
            EMsg::Elect { from, to } => {
                let me = &mut s.members[to as usize];
                if let Some(v) = me.handle_elect(member_pk(from), rs[from as usize], || rs[to as usize]) {
                    s.inflight.push(EMsg::Vote {
                        to: index_of(&v.to),
                        tokens: v.tokens,
                    });
                }
            }
            EMsg::Vote { to, tokens } => {
                if let VoteEffect::Forward(v) = s.members[to as usize].handle_vote(&tokens) {
                    s.inflight.push(EMsg::Vote {
                        to: index_of(&v.to),
                        tokens: v.tokens,
                    });
                }
            }
        }
        s.inflight.sort();
        s
    }

    fn winners(&self) -> usize {
        self.members.iter().filter(|m| m.is_won()).count()
    }

    fn tokens_duplicated(&self) -> bool {
        let mut seen = BTreeSet::new();
        let held = self.members.iter().flat_map(|m| m.tokens_held().iter().copied());
        let flying = self.inflight.iter().flat_map(|m| match m {
            EMsg::Vote { tokens, .. } => tokens.clone(),
            _ => Vec::new(),
        });
        !held.chain(flying).all(|t| seen.insert(t))
    }
}

struct ElectionExplorer<'a> {
    rs: &'a [u64],
    memo: HashMap<EState, u128>,
    multiple_winners: u64,
    token_duplications: u64,
}

impl ElectionExplorer<'_> {
    fn explore(&mut self, s: EState) -> u128 {
        if let Some(n) = self.memo.get(&s) {
            return *n;
        }
        if s.winners() > 1 {
            self.multiple_winners += 1;
        }
        if s.tokens_duplicated() {
            self.token_duplications += 1;
        }
        let paths = if s.inflight.is_empty() {
            1
        } else {
            let mut total: u128 = 0;
            for i in 0..s.inflight.len() {
                if i > 0 && s.inflight[i] == s.inflight[i - 1] {
                    continue;
                }
                total = total.saturating_add(self.explore(s.deliver(i, self.rs)));
                let mut dropped = s.clone();
                dropped.inflight.remove(i);
                total = total.saturating_add(self.explore(dropped));
            }
            total
        };
        self.memo.insert(s, paths);
        paths
    }
}

/// Every start order, delivery order and drop pattern of one election, for
/// every assignment of random numbers from `1..=c` (so ties are covered).
pub fn check_election(c: usize) -> ElectionCheckReport {
    assert!((1..=4).contains(&c), "exhaustive election check supports 1..=4 members");
    let committee: Vec<PublicKey> = (0..c as u8).map(member_pk).collect();
    let mut report = ElectionCheckReport {
        committee_size: c,
        ..Default::default()
    };
    let mut rs = vec![1u64; c];
    loop {
        let init = EState {
            members: committee
                .iter()
                .map(|pk| ElectionState::new(1, 0, *pk, &committee).expect("member"))
                .collect(),
            inflight: (0..c as u8).map(|who| EMsg::Start { who }).collect(),
        };
        let mut ex = ElectionExplorer {
            rs: &rs,
            memo: HashMap::new(),
            multiple_winners: 0,
            token_duplications: 0,
        };
        let schedules = ex.explore(init);
        report.assignments += 1;
        report.states += ex.memo.len() as u64;
        report.schedules = report.schedules.saturating_add(schedules);
        report.multiple_winners += ex.multiple_winners;
        report.token_duplications += ex.token_duplications;
        // Next assignment in 1..=c per position.
        let mut i = 0;
        while i < c && rs[i] == c as u64 {
            rs[i] = 1;
            i += 1;
        }
        if i == c {
            break;
        }
        rs[i] += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_acceptor_single_proposer_is_safe() {
        let r = check_consensus(&CheckConfig::new(1, 1));
        assert_eq!(r.violations, 0);
        assert!(r.schedules > 0);
    }

    #[test]
    fn two_versions_three_acceptors_safe() {
        let r = check_consensus(&CheckConfig::new(3, 2));
        eprintln!("{r:?}");
        assert_eq!(r.violations, 0, "{:?}", r.counterexample);
        assert!(r.states > 1000);
    }

    #[test]
    fn skipping_learn_forks() {
        let cfg = CheckConfig {
            skip_learn: Some(2),
            ..CheckConfig::new(3, 2)
        };
        let r = check_consensus(&cfg);
        assert!(r.violations > 0);
        assert!(r.counterexample.is_some());
    }

    #[test]
    fn literal_acceptor_rule_forks() {
        let cfg = CheckConfig {
            rule: AcceptorRule::Literal,
            ..CheckConfig::new(3, 2)
        };
        assert!(check_consensus(&cfg).violations > 0);
    }

    #[test]
    fn election_of_two_never_has_two_winners() {
        let r = check_election(2);
        assert_eq!(r.multiple_winners, 0);
        assert_eq!(r.token_duplications, 0);
        assert_eq!(r.assignments, 4);
    }
}
