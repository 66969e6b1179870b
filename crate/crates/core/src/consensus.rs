//! Proposer and acceptor state machines of the block confirmation protocol.
//!
//! These are transport-free: the node feeds in verified, decrypted messages
//! and acts on the returned decisions. They are generic over the block type
//! so the bounded schedule checker drives exactly this code with small block
//! identifiers.

use std::collections::BTreeSet;

use thiserror::Error;

/// Acceptor voting discipline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AcceptorRule {
    /// A LEARN at version v is also a promise: no later vote for a version
    /// below v.
    #[default]
    PromiseOnLearn,
    /// Vote on `cv > cv_max` alone. Kept to demonstrate the fork it admits.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LearnReply<B> {
    Empty,
    Notify { block: B, version: u32 },
}

/// Per-height acceptor state.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AcceptorState<B> {
    pub height: u64,
    /// Highest version voted for; `None` until the first vote so that a
    /// version-0 proposal can be accepted.
    pub cv_max: Option<u32>,
    /// Highest version whose LEARN this acceptor answered.
    pub promised: Option<u32>,
    pub blk_pending: Option<B>,
    rule: AcceptorRule,
}

impl<B: Clone> AcceptorState<B> {
    pub fn new(height: u64) -> Self {
        Self::with_rule(height, AcceptorRule::default())
    }

    pub fn with_rule(height: u64, rule: AcceptorRule) -> Self {
        AcceptorState {
            height,
            cv_max: None,
            promised: None,
            blk_pending: None,
            rule,
        }
    }

    /// PROPOSE at `version`. Returns true when the acceptor votes.
    pub fn on_propose(&mut self, block: &B, version: u32) -> bool {
        if self.cv_max.is_some_and(|cv| version <= cv) {
            return false;
        }
        if self.rule == AcceptorRule::PromiseOnLearn && self.promised.is_some_and(|p| version < p) {
            return false;
        }
        self.cv_max = Some(version);
        self.blk_pending = Some(block.clone());
        true
    }

    pub fn on_learn(&mut self, version: u32) -> LearnReply<B> {
        if self.rule == AcceptorRule::PromiseOnLearn {
            self.promised = Some(self.promised.map_or(version, |p| p.max(version)));
        }
        match (&self.blk_pending, self.cv_max) {
            (Some(block), Some(version)) => LearnReply::Notify {
                block: block.clone(),
                version,
            },
            _ => LearnReply::Empty,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("two acceptors report different blocks at version {version}")]
pub struct SafetyViolation {
    pub version: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LearnOutcome<B> {
    /// No acceptor in the quorum voted; any block may be proposed.
    Fresh,
    /// Re-propose the highest-version pending block.
    Adopt(B),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Learner<B> {
    pub height: u64,
    pub version: u32,
    acceptor_count: usize,
    responded: BTreeSet<usize>,
    best: Option<(u32, B)>,
    done: bool,
}

/// Result of starting the learn step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LearnStart<B> {
    /// Version 0 has no predecessor to learn from.
    Immediate,
    /// Broadcast LEARN and feed replies into this learner.
    Collect(Learner<B>),
}

pub fn learn<B: Clone + Eq>(height: u64, version: u32, acceptor_count: usize) -> LearnStart<B> {
    if version == 0 {
        LearnStart::Immediate
    } else {
        LearnStart::Collect(Learner {
            height,
            version,
            acceptor_count,
            responded: BTreeSet::new(),
            best: None,
            done: false,
        })
    }
}

/// Strict majority of `n`.
pub fn is_majority(count: usize, n: usize) -> bool {
    2 * count > n
}

impl<B: Clone + Eq> Learner<B> {
    pub fn responses(&self) -> usize {
        self.responded.len()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Reply from the acceptor holding certificate `acceptor`. Returns the
    /// outcome once more than half of the acceptors answered.
    pub fn on_reply(&mut self, acceptor: usize, reply: LearnReply<B>) -> Result<Option<LearnOutcome<B>>, SafetyViolation> {
        if self.done || !self.responded.insert(acceptor) {
            return Ok(None);
        }
        if let LearnReply::Notify { block, version } = reply {
            match &self.best {
                Some((v, b)) if *v == version && *b != block => {
                    return Err(SafetyViolation { version });
                }
                Some((v, _)) if *v >= version => {}
                _ => self.best = Some((version, block)),
            }
        }
        if !is_majority(self.responded.len(), self.acceptor_count) {
            return Ok(None);
        }
        self.done = true;
        Ok(Some(match self.best.take() {
            None => LearnOutcome::Fresh,
            Some((_, b)) => LearnOutcome::Adopt(b),
        }))
    }
}

/// Proposer's vote collection for one (height, version).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Proposal<B> {
    pub block: B,
    pub version: u32,
    acceptor_count: usize,
    votes: BTreeSet<usize>,
    confirmed: bool,
}

impl<B> Proposal<B> {
    pub fn new(block: B, version: u32, acceptor_count: usize) -> Self {
        Proposal {
            block,
            version,
            acceptor_count,
            votes: BTreeSet::new(),
            confirmed: false,
        }
    }

    pub fn vote_count(&self) -> usize {
        self.votes.len()
    }

    pub fn is_confirmed(&self) -> bool {
        self.confirmed
    }

    /// Verified vote from the acceptor holding certificate `acceptor`.
    /// Returns true exactly once: when the majority is reached.
    pub fn on_vote(&mut self, acceptor: usize) -> bool {
        if self.confirmed || !self.votes.insert(acceptor) {
            return false;
        }
        if is_majority(self.votes.len(), self.acceptor_count) {
            self.confirmed = true;
            return true;
        }
        false
    }
}
