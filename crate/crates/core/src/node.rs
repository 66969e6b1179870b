//! Per-node orchestration: one event-driven state machine wiring the
//! enclave, chain store, membership ledger, sortition, election and the
//! proposer/acceptor machines together, plus the reformation timer and
//! block catch-up.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use crate::chain::{Appended, AppendError, Block, BlockDraft, ChainStore};
use crate::codec::{Decode, Encode};
use crate::consensus::{
    learn, AcceptorRule, AcceptorState, LearnOutcome, LearnReply, LearnStart, Learner, Proposal,
};
use crate::election::{ElectionState, Vote, VoteEffect};
use crate::hash::Hash;
use crate::membership::{challenge, request_join, MembershipLedger, RegistrationTx};
use crate::message::{
    signed, AcceptVoteBody, AcceptVoteMsg, BlockRequestMsg, BlockResponseMsg, ConfirmMsg, ElectMsg,
    ElectVoteMsg, LearnMsg, LearnReplyBody, LearnReplyMsg, ProposeMsg, ProtocolMessage,
};
use crate::netsim::{Context, Process, SimTime, Trace};
use crate::sortition::{probe_acceptor, select_acceptors, verify_nonce, AcceptorCredential, CommitteeSpec};
use crate::tee::{Enclave, PublicKey};
use crate::NodeId;

/// Network address book: enclave key to simulator address.
#[derive(Clone, Debug, Default)]
pub struct Directory {
    by_pk: BTreeMap<PublicKey, NodeId>,
}

impl Directory {
    pub fn new(entries: impl IntoIterator<Item = (PublicKey, NodeId)>) -> Self {
        Directory {
            by_pk: entries.into_iter().collect(),
        }
    }

    pub fn lookup(&self, pk: &PublicKey) -> Option<NodeId> {
        self.by_pk.get(pk).copied()
    }

    pub fn len(&self) -> usize {
        self.by_pk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_pk.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub acceptor_rule: AcceptorRule,
    /// Send JOIN at start.
    pub join_at_start: bool,
    /// Re-register before the current registration expires.
    pub renew: bool,
    /// Blocks before expiry at which renewal starts.
    pub renew_margin: u64,
    /// Blocks between repeated JOINs while unregistered.
    pub rejoin_interval: u64,
    /// Confirmed heights after which this node starts seeking membership.
    pub join_triggers: BTreeSet<u64>,
    pub payload_bytes: usize,
    /// Minimum simulated time between two catch-up requests.
    pub request_interval_ms: SimTime,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            acceptor_rule: AcceptorRule::default(),
            join_at_start: true,
            renew: true,
            renew_margin: 5,
            rejoin_interval: 3,
            join_triggers: BTreeSet::new(),
            payload_bytes: 32,
            request_interval_ms: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Timer {
    Reform { height: u64, version: u32 },
}

#[derive(Clone, Debug)]
pub enum Observation {
    Won { height: u64, version: u32 },
    /// Proposer reached an acceptor majority. `trace` is the causal history
    /// of the CONFIRM it broadcasts.
    ProposalConfirmed { height: u64, version: u32, hash: Hash, trace: Trace },
    /// Block appended to this node's store.
    Applied { height: u64, via_confirm: bool },
    SafetyViolation { height: u64, version: u32 },
    Fork { height: u64, stored: Hash, offered: Hash },
}

enum ProposerPhase {
    Learning(Learner<Block>),
    Proposing(Proposal<Block>),
}

struct AcceptorSlot {
    cred: AcceptorCredential,
    state: AcceptorState<Block>,
}

/// Work on the height after the head.
struct Round {
    height: u64,
    version: u32,
    base_seed: u64,
    members: Vec<PublicKey>,
    acceptor_count: usize,
    election: Option<ElectionState>,
    proposer: Option<ProposerPhase>,
}

pub struct Node {
    id: NodeId,
    enclave: Enclave,
    directory: Rc<Directory>,
    cfg: NodeConfig,
    store: ChainStore,
    ledger: MembershipLedger,
    round: Round,
    acceptor: Option<AcceptorSlot>,
    /// PROPOSEd blocks for the next height, by header hash.
    proposals: BTreeMap<Hash, Block>,
    future: BTreeMap<u64, Vec<(NodeId, ProtocolMessage, Trace)>>,
    future_len: usize,
    unmatched_confirm: Option<(Hash, u32)>,
    pool: BTreeMap<PublicKey, RegistrationTx>,
    consumed: BTreeSet<(PublicKey, u64)>,
    challenged: BTreeSet<(PublicKey, u64)>,
    seeking: bool,
    last_join_head: Option<u64>,
    last_request_at: Option<SimTime>,
    halted: bool,
    committee_log: Vec<CommitteeSpec>,
    acceptor_heights: Vec<u64>,
}

const FUTURE_CAP: usize = 8192;
const RESPONSE_BLOCKS: u64 = 64;

impl Node {
    pub fn new(id: NodeId, enclave: Enclave, store: ChainStore, directory: Rc<Directory>, cfg: NodeConfig) -> Self {
        let ledger = MembershipLedger::from_store(&store);
        let round = Round {
            height: store.head_height() + 1,
            version: 0,
            base_seed: 0,
            members: Vec::new(),
            acceptor_count: 0,
            election: None,
            proposer: None,
        };
        Node {
            id,
            enclave,
            directory,
            seeking: cfg.join_at_start,
            cfg,
            store,
            ledger,
            round,
            acceptor: None,
            proposals: BTreeMap::new(),
            future: BTreeMap::new(),
            future_len: 0,
            unmatched_confirm: None,
            pool: BTreeMap::new(),
            consumed: BTreeSet::new(),
            challenged: BTreeSet::new(),
            last_join_head: None,
            last_request_at: None,
            halted: false,
            committee_log: Vec::new(),
            acceptor_heights: Vec::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn public_key(&self) -> PublicKey {
        self.enclave.public_key()
    }

    pub fn store(&self) -> &ChainStore {
        &self.store
    }

    pub fn ledger(&self) -> &MembershipLedger {
        &self.ledger
    }

    pub fn current_version(&self) -> u32 {
        self.round.version
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Every committee this node derived, in order.
    pub fn committee_log(&self) -> &[CommitteeSpec] {
        &self.committee_log
    }

    /// Heights at which this node's probe opened an acceptor certificate.
    pub fn acceptor_heights(&self) -> &[u64] {
        &self.acceptor_heights
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    /// Bootstrap: enter the first open height and announce if joining.
    pub fn start(&mut self, ctx: &mut Context<'_, Self>) {
        let next = self.store.head_height() + 1;
        self.enter_height(ctx, next);
        let registered = self
            .ledger
            .record(&self.public_key())
            .is_some_and(|r| r.expiry_height > next);
        if self.seeking && !registered {
            self.send_join(ctx);
        }
    }

    fn params_timeout(&self) -> SimTime {
        self.store.params().timeout_ms
    }

    fn send_join(&mut self, ctx: &mut Context<'_, Self>) {
        let join = request_join(&mut self.enclave);
        self.last_join_head = Some(self.store.head_height());
        ctx.broadcast(ProtocolMessage::Join(join));
    }

    fn addresses(&self, keys: &[PublicKey]) -> Vec<NodeId> {
        keys.iter().filter_map(|k| self.directory.lookup(k)).collect()
    }

    fn enter_height(&mut self, ctx: &mut Context<'_, Self>, height: u64) {
        let prev = height - 1;
        let certs = self.store.certs_at(prev).expect("previous block stored");
        self.acceptor = probe_acceptor(&self.enclave, certs).map(|cred| AcceptorSlot {
            cred,
            state: AcceptorState::with_rule(height, self.cfg.acceptor_rule),
        });
        if self.acceptor.is_some() {
            self.acceptor_heights.push(height);
        }
        self.round = Round {
            height,
            version: 0,
            base_seed: self.store.seed_at(prev).expect("previous block stored"),
            members: self.ledger.active_keys(height),
            acceptor_count: certs.len(),
            election: None,
            proposer: None,
        };
        self.begin_version(ctx, 0);
    }

    /// Form the committee of `version` for the open height, retiring any
    /// election or proposer activity of older versions.
    fn begin_version(&mut self, ctx: &mut Context<'_, Self>, version: u32) {
        let saved = ctx.cause().clone();
        ctx.set_cause(Trace::empty());
        let me = self.public_key();
        let r = &mut self.round;
        r.version = version;
        r.election = None;
        r.proposer = None;
        let spec = CommitteeSpec::derive(
            r.height,
            version,
            r.base_seed,
            &r.members,
            self.store.params().committee_size,
        );
        let height = r.height;
        ctx.set_timer(ctx.now() + self.params_timeout(), Timer::Reform { height, version });
        if spec.contains(&me) {
            let mut el = ElectionState::new(height, version, me, &spec.members).expect("member");
            let enclave = &mut self.enclave;
            let announce = el.start(|| enclave.trusted_random());
            let won = el.is_won();
            self.round.election = Some(el);
            if let Some(r) = announce {
                let others: Vec<PublicKey> = spec.members.iter().copied().filter(|k| *k != me).collect();
                let to = self.addresses(&others);
                let msg = signed(&self.enclave, |pk, sig| {
                    ProtocolMessage::Elect(ElectMsg { height, version, r, pk, sig })
                });
                ctx.multicast(to, msg);
            }
            if won {
                self.on_won(ctx);
            }
        }
        self.committee_log.push(spec);
        ctx.set_cause(saved);
    }

    fn on_won(&mut self, ctx: &mut Context<'_, Self>) {
        let (height, version) = (self.round.height, self.round.version);
        ctx.observe(Observation::Won { height, version });
        match learn::<Block>(height, version, self.round.acceptor_count) {
            LearnStart::Immediate => {
                if let Some(block) = self.generate_block(version) {
                    self.propose(ctx, block);
                }
            }
            LearnStart::Collect(learner) => {
                self.round.proposer = Some(ProposerPhase::Learning(learner));
                let msg = signed(&self.enclave, |pk, sig| {
                    ProtocolMessage::Learn(LearnMsg { height, version, pk, sig })
                });
                ctx.broadcast(msg);
            }
        }
    }

    fn generate_block(&mut self, version: u32) -> Option<Block> {
        let height = self.round.height;
        let registrations: Vec<RegistrationTx> = self
            .pool
            .values()
            .filter(|tx| {
                self.ledger
                    .record(&tx.challenger_pk)
                    .is_some_and(|r| r.active_at(height))
                    && self.ledger.admits(height, &tx.pk, tx.quote.platform_id)
            })
            .cloned()
            .collect();
        let mut next = self.ledger.clone();
        next.apply_block(height, registrations.iter().map(|r| (r.pk, r.quote.platform_id)));
        let candidates = next.active_keys(height + 1);
        let params = *self.store.params();
        let acceptors = select_acceptors(&mut self.enclave, &candidates, params.acceptor_count as usize).ok()?;
        let seed = self.enclave.trusted_random();
        let payload = self.enclave.random_bytes(self.cfg.payload_bytes);
        Some(
            BlockDraft {
                height,
                parent_hash: self.store.head_hash(),
                committee_version: version,
                seed,
                acceptor_certs: acceptors.into_certs(),
                registrations,
                payload,
            }
            .seal(&self.enclave),
        )
    }

    fn propose(&mut self, ctx: &mut Context<'_, Self>, block: Block) {
        let version = self.round.version;
        self.proposals.insert(block.hash(), block.clone());
        self.round.proposer = Some(ProposerPhase::Proposing(Proposal::new(
            block.clone(),
            version,
            self.round.acceptor_count,
        )));
        let msg = signed(&self.enclave, |pk, sig| {
            ProtocolMessage::Propose(ProposeMsg { block, version, pk, sig })
        });
        ctx.broadcast(msg);
    }

    fn send_vote(&mut self, ctx: &mut Context<'_, Self>, vote: Vote) {
        let Some(to) = self.directory.lookup(&vote.to) else {
            return;
        };
        let (height, version) = (self.round.height, self.round.version);
        let msg = signed(&self.enclave, |voter_pk, sig| {
            ProtocolMessage::ElectVote(ElectVoteMsg {
                height,
                version,
                candidate: vote.to,
                carried_tokens: vote.tokens,
                voter_pk,
                sig,
            })
        });
        ctx.send(to, msg);
    }

    /// Move to a higher version seen on the wire.
    fn adopt(&mut self, ctx: &mut Context<'_, Self>, version: u32) {
        if version > self.round.version {
            self.begin_version(ctx, version);
        }
    }

    fn request_blocks(&mut self, ctx: &mut Context<'_, Self>, peer: NodeId, force: bool) {
        let now = ctx.now();
        if !force
            && self
                .last_request_at
                .is_some_and(|t| now < t + self.cfg.request_interval_ms)
        {
            return;
        }
        if peer == self.id {
            return;
        }
        self.last_request_at = Some(now);
        let from_height = self.store.head_height() + 1;
        let msg = signed(&self.enclave, |pk, sig| {
            ProtocolMessage::BlockRequest(BlockRequestMsg { from_height, pk, sig })
        });
        ctx.send(peer, msg);
    }

    fn buffer(&mut self, ctx: &mut Context<'_, Self>, from: NodeId, height: u64, msg: ProtocolMessage) {
        if self.future_len < FUTURE_CAP {
            self.future
                .entry(height)
                .or_default()
                .push((from, msg, ctx.cause().clone()));
            self.future_len += 1;
        }
        self.request_blocks(ctx, from, false);
    }

    fn apply(&mut self, ctx: &mut Context<'_, Self>, block: Block, via_confirm: bool) -> bool {
        match self.store.append_confirmed(block, self.enclave.crypto()) {
            Ok(Appended::New) => {
                self.on_block_confirmed(ctx, via_confirm);
                true
            }
            Ok(Appended::Duplicate) => false,
            Err(AppendError::Fork { height, stored, offered }) => {
                ctx.observe(Observation::Fork { height, stored, offered });
                false
            }
            Err(_) => false,
        }
    }

    fn on_block_confirmed(&mut self, ctx: &mut Context<'_, Self>, via_confirm: bool) {
        let height = self.store.head_height();
        let me = self.public_key();
        let block = self.store.block(height).expect("just appended").clone();
        self.ledger
            .apply_block(height, block.registrations.iter().map(|r| (r.pk, r.quote.platform_id)));
        for reg in &block.registrations {
            self.consumed.insert((reg.pk, reg.quote.nonce));
            if reg.pk == me && self.ledger.record(&me).is_some_and(|r| r.join_height == height) {
                let _ = self.enclave.install_provision(&reg.provision);
                if !self.cfg.renew {
                    self.seeking = false;
                }
            }
        }
        let consumed = &self.consumed;
        self.pool.retain(|pk, tx| !consumed.contains(&(*pk, tx.quote.nonce)));
        ctx.observe(Observation::Applied { height, via_confirm });
        self.proposals.retain(|_, b| b.height() > height);
        self.unmatched_confirm = None;
        self.maybe_join(ctx, height);
        self.enter_height(ctx, height + 1);

        let stale: Vec<u64> = self.future.range(..=height).map(|(h, _)| *h).collect();
        for h in stale {
            self.future_len -= self.future.remove(&h).map_or(0, |v| v.len());
        }
        if let Some(msgs) = self.future.remove(&(height + 1)) {
            self.future_len -= msgs.len();
            let saved = ctx.cause().clone();
            for (from, msg, trace) in msgs {
                if self.halted || self.store.head_height() != height {
                    break;
                }
                ctx.set_cause(trace);
                self.dispatch(ctx, from, msg);
            }
            ctx.set_cause(saved);
        }
    }

    fn maybe_join(&mut self, ctx: &mut Context<'_, Self>, head: u64) {
        if self.cfg.join_triggers.contains(&head) {
            self.seeking = true;
            self.last_join_head = None;
        }
        let next = head + 1;
        let need = match self.ledger.record(&self.public_key()) {
            Some(r) if r.expiry_height > next => {
                self.cfg.renew && r.expiry_height <= next + self.cfg.renew_margin
            }
            _ => self.seeking,
        };
        let due = self
            .last_join_head
            .is_none_or(|l| head >= l + self.cfg.rejoin_interval);
        if need && due {
            self.send_join(ctx);
        }
    }

    fn dispatch(&mut self, ctx: &mut Context<'_, Self>, from: NodeId, msg: ProtocolMessage) {
        match msg {
            ProtocolMessage::Join(j) => self.on_join(ctx, j),
            ProtocolMessage::RegTx(t) => self.on_reg_tx(t),
            ProtocolMessage::BlockRequest(m) => self.on_block_request(ctx, from, m),
            ProtocolMessage::BlockResponse(m) => self.on_block_response(ctx, from, m),
            ProtocolMessage::Confirm(m) => self.on_confirm(ctx, from, m),
            other => {
                let height = other.height().expect("height-scoped variant");
                let head = self.store.head_height();
                if height <= head {
                    return;
                }
                if height > head + 1 {
                    self.buffer(ctx, from, height, other);
                    return;
                }
                match other {
                    ProtocolMessage::Elect(m) => self.on_elect(ctx, m),
                    ProtocolMessage::ElectVote(m) => self.on_elect_vote(ctx, m),
                    ProtocolMessage::Learn(m) => self.on_learn(ctx, from, m),
                    ProtocolMessage::LearnReply(m) => self.on_learn_reply(ctx, m),
                    ProtocolMessage::Propose(m) => self.on_propose(ctx, from, m),
                    ProtocolMessage::AcceptVote(m) => self.on_accept_vote(ctx, m),
                    _ => unreachable!("handled above"),
                }
            }
        }
    }

    fn on_join(&mut self, ctx: &mut Context<'_, Self>, join: crate::membership::JoinRequest) {
        let next = self.store.head_height() + 1;
        let me = self.public_key();
        if !self.enclave.has_credential() || !self.ledger.record(&me).is_some_and(|r| r.active_at(next)) {
            return;
        }
        if !self.challenged.insert((join.pk, join.quote.nonce)) {
            return;
        }
        let active = self.ledger.active_at(next);
        let measurement = self.store.genesis().measurement;
        if let Ok(tx) = challenge(&mut self.enclave, &active, &join, &measurement) {
            ctx.broadcast(ProtocolMessage::RegTx(tx));
        }
    }

    fn on_reg_tx(&mut self, tx: RegistrationTx) {
        if self.consumed.contains(&(tx.pk, tx.quote.nonce)) || self.pool.contains_key(&tx.pk) {
            return;
        }
        if tx.verify(self.enclave.crypto(), &self.store.genesis().measurement) {
            self.pool.insert(tx.pk, tx);
        }
    }

    fn on_elect(&mut self, ctx: &mut Context<'_, Self>, m: ElectMsg) {
        if m.version < self.round.version {
            return;
        }
        self.adopt(ctx, m.version);
        let enclave = &mut self.enclave;
        let Some(el) = self.round.election.as_mut() else {
            return;
        };
        if let Some(vote) = el.handle_elect(m.pk, m.r, || enclave.trusted_random()) {
            self.send_vote(ctx, vote);
        }
    }

    fn on_elect_vote(&mut self, ctx: &mut Context<'_, Self>, m: ElectVoteMsg) {
        self.adopt(ctx, m.version);
        if m.version != self.round.version || m.candidate != self.public_key() {
            return;
        }
        let Some(el) = self.round.election.as_mut() else {
            return;
        };
        match el.handle_vote(&m.carried_tokens) {
            VoteEffect::Absorbed { won_now: true } => self.on_won(ctx),
            VoteEffect::Forward(vote) => self.send_vote(ctx, vote),
            _ => {}
        }
    }

    fn on_learn(&mut self, ctx: &mut Context<'_, Self>, from: NodeId, m: LearnMsg) {
        self.adopt(ctx, m.version);
        let me = self.public_key();
        let Some(slot) = self.acceptor.as_mut() else {
            return;
        };
        let pending = match slot.state.on_learn(m.version) {
            LearnReply::Empty => None,
            LearnReply::Notify { block, version } => Some((block, version)),
        };
        let body = LearnReplyBody {
            pending,
            acceptor_nonce: slot.cred.nonce,
            acceptor_pk: me,
        };
        let Ok(sealed) = self.enclave.cert_encrypt(&m.pk, &body.to_bytes()) else {
            return;
        };
        let (height, version, learner) = (m.height, m.version, m.pk);
        let msg = signed(&self.enclave, |pk, sig| {
            ProtocolMessage::LearnReply(LearnReplyMsg { height, version, learner, sealed, pk, sig })
        });
        ctx.send(from, msg);
    }

    fn on_learn_reply(&mut self, ctx: &mut Context<'_, Self>, m: LearnReplyMsg) {
        if m.learner != self.public_key() || m.version != self.round.version {
            return;
        }
        let Some(ProposerPhase::Learning(learner)) = self.round.proposer.as_mut() else {
            return;
        };
        let Some(body) = self
            .enclave
            .cert_decrypt(&m.sealed)
            .and_then(|b| LearnReplyBody::from_bytes(&b).ok())
        else {
            return;
        };
        if body.acceptor_pk != m.pk {
            return;
        }
        let certs = self.store.certs_at(m.height - 1).expect("head block");
        let Some(index) = verify_nonce(certs, body.acceptor_nonce) else {
            return;
        };
        let reply = match body.pending {
            None => LearnReply::Empty,
            Some((block, _)) if block.height() != m.height => return,
            Some((block, version)) => LearnReply::Notify { block, version },
        };
        match learner.on_reply(index, reply) {
            Err(v) => {
                ctx.observe(Observation::SafetyViolation {
                    height: m.height,
                    version: v.version,
                });
                self.halted = true;
            }
            Ok(Some(LearnOutcome::Fresh)) => {
                if let Some(block) = self.generate_block(m.version) {
                    self.propose(ctx, block);
                }
            }
            Ok(Some(LearnOutcome::Adopt(block))) => self.propose(ctx, block),
            Ok(None) => {}
        }
    }

    fn on_propose(&mut self, ctx: &mut Context<'_, Self>, from: NodeId, m: ProposeMsg) {
        self.adopt(ctx, m.version);
        let block = m.block;
        if block.header.parent_hash != self.store.head_hash() || !block.verify(self.enclave.crypto()) {
            return;
        }
        let hash = block.hash();
        self.proposals.entry(hash).or_insert_with(|| block.clone());
        let me = self.public_key();
        if let Some(slot) = self.acceptor.as_mut() {
            if slot.state.on_propose(&block, m.version) {
                let body = AcceptVoteBody {
                    header_hash: hash,
                    acceptor_nonce: slot.cred.nonce,
                    acceptor_pk: me,
                };
                if let Ok(sealed) = self.enclave.cert_encrypt(&m.pk, &body.to_bytes()) {
                    let (height, version, proposer) = (block.height(), m.version, m.pk);
                    let msg = signed(&self.enclave, |pk, sig| {
                        ProtocolMessage::AcceptVote(AcceptVoteMsg { height, version, proposer, sealed, pk, sig })
                    });
                    ctx.send(from, msg);
                }
            }
        }
        if self.unmatched_confirm.is_some_and(|(h, _)| h == hash) {
            self.apply(ctx, block, true);
        }
    }

    fn on_accept_vote(&mut self, ctx: &mut Context<'_, Self>, m: AcceptVoteMsg) {
        if m.proposer != self.public_key() || m.version != self.round.version {
            return;
        }
        let Some(ProposerPhase::Proposing(proposal)) = self.round.proposer.as_mut() else {
            return;
        };
        let Some(body) = self
            .enclave
            .cert_decrypt(&m.sealed)
            .and_then(|b| AcceptVoteBody::from_bytes(&b).ok())
        else {
            return;
        };
        if body.acceptor_pk != m.pk || body.header_hash != proposal.block.hash() {
            return;
        }
        let certs = self.store.certs_at(m.height - 1).expect("head block");
        let Some(index) = verify_nonce(certs, body.acceptor_nonce) else {
            return;
        };
        if proposal.on_vote(index) {
            let header = proposal.block.header.clone();
            let version = proposal.version;
            ctx.observe(Observation::ProposalConfirmed {
                height: header.height,
                version,
                hash: header.hash(),
                trace: ctx.cause().extended(crate::message::MessageKind::Confirm),
            });
            let msg = signed(&self.enclave, |pk, sig| {
                ProtocolMessage::Confirm(ConfirmMsg { header, version, pk, sig })
            });
            ctx.broadcast(msg);
        }
    }

    fn on_confirm(&mut self, ctx: &mut Context<'_, Self>, from: NodeId, m: ConfirmMsg) {
        let height = m.header.height;
        let head = self.store.head_height();
        let hash = m.header.hash();
        if height <= head {
            if let Some(stored) = self.store.hash_at(height).filter(|s| *s != hash) {
                ctx.observe(Observation::Fork { height, stored, offered: hash });
            }
            return;
        }
        if height > head + 1 {
            self.buffer(ctx, from, height, ProtocolMessage::Confirm(m));
            return;
        }
        match self.proposals.get(&hash).cloned() {
            Some(block) => {
                self.apply(ctx, block, true);
            }
            None => {
                self.unmatched_confirm = Some((hash, m.version));
                self.request_blocks(ctx, from, false);
            }
        }
    }

    fn on_block_request(&mut self, ctx: &mut Context<'_, Self>, from: NodeId, m: BlockRequestMsg) {
        let head = self.store.head_height();
        if m.from_height == 0 || m.from_height > head {
            return;
        }
        let last = head.min(m.from_height + RESPONSE_BLOCKS - 1);
        let blocks: Vec<Block> = (m.from_height..=last)
            .filter_map(|h| self.store.block(h).cloned())
            .collect();
        let msg = signed(&self.enclave, |pk, sig| {
            ProtocolMessage::BlockResponse(BlockResponseMsg { blocks, pk, sig })
        });
        ctx.send(from, msg);
    }

    fn on_block_response(&mut self, ctx: &mut Context<'_, Self>, from: NodeId, m: BlockResponseMsg) {
        let full = m.blocks.len() as u64 == RESPONSE_BLOCKS;
        let mut applied = false;
        for block in m.blocks {
            if self.halted {
                return;
            }
            let head = self.store.head_height();
            if block.height() <= head {
                continue;
            }
            if block.height() > head + 1 || !self.apply(ctx, block, false) {
                break;
            }
            applied = true;
        }
        if applied && (full || !self.future.is_empty()) {
            self.request_blocks(ctx, from, true);
        }
    }

    fn on_reform_timeout(&mut self, ctx: &mut Context<'_, Self>, height: u64, version: u32) {
        if height != self.round.height || version != self.round.version || height <= self.store.head_height() {
            return;
        }
        if let Some(peer) = self.future.values().flatten().map(|(from, _, _)| *from).next() {
            self.request_blocks(ctx, peer, true);
        }
        self.begin_version(ctx, version + 1);
    }
}

impl Process for Node {
    type Timer = Timer;
    type Observation = Observation;

    fn on_message(&mut self, ctx: &mut Context<'_, Self>, from: NodeId, msg: ProtocolMessage) {
        if self.halted || !msg.verify_signature(self.enclave.crypto()) {
            return;
        }
        self.dispatch(ctx, from, msg);
    }

    fn on_timer(&mut self, ctx: &mut Context<'_, Self>, timer: Timer) {
        if self.halted {
            return;
        }
        match timer {
            Timer::Reform { height, version } => self.on_reform_timeout(ctx, height, version),
        }
    }
}
