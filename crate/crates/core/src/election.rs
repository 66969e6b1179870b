//! Proposer election by trusted random numbers with vote-token transfer.
//!
//! Each committee member starts out holding its own vote token. A member
//! hands all tokens it holds to the first candidate whose random number beats
//! every number it has seen; a member that already voted passes any tokens
//! that reach it on to the candidate it voted for. A member wins when it
//! holds a strict majority of the committee's tokens. Tokens are never
//! copied into two holders, so at most one member per (height, version) can
//! win, whatever the network does.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::tee::PublicKey;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ElectionError {
    #[error("node is not a member of committee ({height}, {version})")]
    NotMember { height: u64, version: u32 },
}

/// Tokens to ship to a candidate in an ELECT-VOTE.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vote {
    pub to: PublicKey,
    pub tokens: Vec<PublicKey>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VoteEffect {
    /// Message carried a token from outside the committee.
    Rejected,
    /// Tokens absorbed; `won_now` is set on the transition to winner.
    Absorbed { won_now: bool },
    /// This node already voted; the tokens move on to its candidate.
    Forward(Vote),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ElectionState {
    pub height: u64,
    pub version: u32,
    me: PublicKey,
    committee: BTreeSet<PublicKey>,
    my_r: Option<u64>,
    /// Largest competing number this node has acted on.
    max_seen: Option<u64>,
    tokens_held: BTreeSet<PublicKey>,
    voted_for: Option<PublicKey>,
    won: bool,
    started: bool,
}

impl ElectionState {
    pub fn new(height: u64, version: u32, me: PublicKey, committee: &[PublicKey]) -> Result<Self, ElectionError> {
        if !committee.contains(&me) {
            return Err(ElectionError::NotMember { height, version });
        }
        Ok(ElectionState {
            height,
            version,
            me,
            committee: committee.iter().copied().collect(),
            my_r: None,
            max_seen: None,
            tokens_held: BTreeSet::from([me]),
            voted_for: None,
            won: false,
            started: false,
        })
    }

    pub fn committee_size(&self) -> usize {
        self.committee.len()
    }

    pub fn my_r(&self) -> Option<u64> {
        self.my_r
    }

    pub fn tokens_held(&self) -> &BTreeSet<PublicKey> {
        &self.tokens_held
    }

    pub fn voted_for(&self) -> Option<PublicKey> {
        self.voted_for
    }

    pub fn is_won(&self) -> bool {
        self.won
    }

    pub fn is_started(&self) -> bool {
        self.started
    }

    fn ensure_r(&mut self, draw: impl FnOnce() -> u64) -> u64 {
        *self.my_r.get_or_insert_with(draw)
    }

    fn check_majority(&mut self) -> bool {
        if !self.won && 2 * self.tokens_held.len() > self.committee.len() {
            self.won = true;
            return true;
        }
        false
    }

    /// Begin the election. Returns the number to multicast in ELECT, or
    /// `None` when this node has already given its token away (it would have
    /// nothing to win with). `won` may flip here for a singleton committee.
    pub fn start(&mut self, draw: impl FnOnce() -> u64) -> Option<u64> {
        let r = self.ensure_r(draw);
        if self.started {
            return None;
        }
        self.started = true;
        self.check_majority();
        (self.voted_for.is_none() && !self.tokens_held.is_empty() && !self.won).then_some(r)
    }

    /// ELECT from `sender` carrying `sender_r`. Votes with every held token
    /// iff the number is strictly larger than anything seen so far.
    pub fn handle_elect(&mut self, sender: PublicKey, sender_r: u64, draw: impl FnOnce() -> u64) -> Option<Vote> {
        if sender == self.me || !self.committee.contains(&sender) {
            return None;
        }
        let my_r = self.ensure_r(draw);
        let bar = self.max_seen.map_or(my_r, |m| m.max(my_r));
        if sender_r <= bar {
            return None;
        }
        self.max_seen = Some(sender_r);
        if self.won || self.tokens_held.is_empty() {
            return None;
        }
        self.voted_for = Some(sender);
        let tokens = std::mem::take(&mut self.tokens_held).into_iter().collect();
        Some(Vote { to: sender, tokens })
    }

    /// ELECT-VOTE carrying `tokens`. Replays are idempotent.
    pub fn handle_vote(&mut self, tokens: &[PublicKey]) -> VoteEffect {
        if tokens.is_empty() || tokens.iter().any(|t| !self.committee.contains(t)) {
            return VoteEffect::Rejected;
        }
        if let (Some(to), false) = (self.voted_for, self.won) {
            return VoteEffect::Forward(Vote { to, tokens: tokens.to_vec() });
        }
        self.tokens_held.extend(tokens.iter().copied());
        VoteEffect::Absorbed { won_now: self.check_majority() }
    }
}
