//! Deterministic discrete-event network simulator.
//!
//! A single event queue ordered by `(deliver_time, sequence)` drives every
//! node. Message fate (drop, delay, duplication) is drawn from one seeded
//! RNG at send time, so a `(scenario, seed)` pair always yields the same
//! event sequence. Messages travel as canonical bytes and are decoded by the
//! receiver; undecodable input is dropped.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::{self, Write as _};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::Encode;
use crate::message::{MessageKind, ProtocolMessage};
use crate::NodeId;

/// Simulated milliseconds.
pub type SimTime = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Latency {
    pub base_ms: u64,
    /// Uniform jitter in `[-jitter_ms, +jitter_ms]`.
    pub jitter_ms: u64,
}

impl Default for Latency {
    fn default() -> Self {
        Latency {
            base_ms: 200,
            jitter_ms: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OfflineWindow {
    pub node: NodeId,
    pub start_ms: SimTime,
    pub end_ms: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionWindow {
    pub groups: Vec<Vec<NodeId>>,
    pub start_ms: SimTime,
    pub end_ms: SimTime,
}

impl PartitionWindow {
    pub fn active(&self, t: SimTime) -> bool {
        self.start_ms <= t && t < self.end_ms
    }

    /// Group index of `node`; nodes outside every group form their own
    /// implicit group.
    pub fn group_of(&self, node: NodeId) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&node))
    }

    pub fn separates(&self, a: NodeId, b: NodeId) -> bool {
        a != b && self.group_of(a) != self.group_of(b)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FaultError {
    #[error("drop rate {0} outside [0, 1]")]
    DropRate(f64),
    #[error("duplicate rate {0} outside [0, 1]")]
    DuplicateRate(f64),
    #[error("node {node} appears in two groups of one partition window")]
    OverlappingGroups { node: NodeId },
    #[error("window ends before it starts")]
    EmptyWindow,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FaultSchedule {
    pub drop_rate: f64,
    pub duplicate_rate: f64,
    pub latency: Latency,
    pub offline: Vec<OfflineWindow>,
    pub partitions: Vec<PartitionWindow>,
}

impl FaultSchedule {
    pub fn validate(&self) -> Result<(), FaultError> {
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(FaultError::DropRate(self.drop_rate));
        }
        if !(0.0..=1.0).contains(&self.duplicate_rate) {
            return Err(FaultError::DuplicateRate(self.duplicate_rate));
        }
        for w in &self.offline {
            if w.end_ms < w.start_ms {
                return Err(FaultError::EmptyWindow);
            }
        }
        for p in &self.partitions {
            if p.end_ms < p.start_ms {
                return Err(FaultError::EmptyWindow);
            }
            let mut seen = std::collections::BTreeSet::new();
            for node in p.groups.iter().flatten() {
                if !seen.insert(*node) {
                    return Err(FaultError::OverlappingGroups { node: *node });
                }
            }
        }
        Ok(())
    }

    pub fn is_offline(&self, node: NodeId, t: SimTime) -> bool {
        self.offline
            .iter()
            .any(|w| w.node == node && w.start_ms <= t && t < w.end_ms)
    }

    pub fn separated(&self, a: NodeId, b: NodeId, t: SimTime) -> bool {
        self.partitions.iter().any(|p| p.active(t) && p.separates(a, b))
    }
}

/// Causal history of a message: the kinds of every message on the chain of
/// handler invocations that produced it, oldest first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Trace(Rc<Vec<MessageKind>>);

impl Trace {
    pub fn empty() -> Self {
        Trace::default()
    }

    pub fn extended(&self, kind: MessageKind) -> Trace {
        let mut v = (*self.0).clone();
        v.push(kind);
        Trace(Rc::new(v))
    }

    pub fn hops(&self) -> &[MessageKind] {
        &self.0
    }

    /// Number of protocol phases: consecutive hops of the same kind (vote
    /// tokens relayed through a representative) form one phase.
    pub fn phases(&self) -> Vec<MessageKind> {
        let mut out: Vec<MessageKind> = Vec::new();
        for k in self.0.iter() {
            if out.last() != Some(k) {
                out.push(*k);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub enum Dest {
    To(NodeId),
    Multicast(Vec<NodeId>),
    Broadcast,
}

/// Handler interface the simulator drives.
pub trait Process {
    type Timer: Clone + fmt::Debug;
    type Observation: Clone + fmt::Debug;

    fn on_message(&mut self, ctx: &mut Context<'_, Self>, from: NodeId, msg: ProtocolMessage)
    where
        Self: Sized;

    fn on_timer(&mut self, ctx: &mut Context<'_, Self>, timer: Self::Timer)
    where
        Self: Sized;
}

struct Outgoing {
    dest: Dest,
    msg: ProtocolMessage,
    trace: Trace,
}

/// Effects a handler may produce.
pub struct Context<'a, P: Process> {
    now: SimTime,
    me: NodeId,
    cause: Trace,
    sends: &'a mut Vec<Outgoing>,
    timers: &'a mut Vec<(SimTime, P::Timer)>,
    observations: &'a mut Vec<(SimTime, NodeId, P::Observation)>,
}

impl<P: Process> Context<'_, P> {
    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn me(&self) -> NodeId {
        self.me
    }

    pub fn cause(&self) -> &Trace {
        &self.cause
    }

    /// Replace the causal history used for subsequent sends.
    pub fn set_cause(&mut self, cause: Trace) {
        self.cause = cause;
    }

    pub fn send(&mut self, to: NodeId, msg: ProtocolMessage) {
        self.push(Dest::To(to), msg);
    }

    pub fn multicast(&mut self, to: Vec<NodeId>, msg: ProtocolMessage) {
        self.push(Dest::Multicast(to), msg);
    }

    pub fn broadcast(&mut self, msg: ProtocolMessage) {
        self.push(Dest::Broadcast, msg);
    }

    fn push(&mut self, dest: Dest, msg: ProtocolMessage) {
        let trace = self.cause.extended(msg.kind());
        self.sends.push(Outgoing { dest, msg, trace });
    }

    pub fn set_timer(&mut self, at: SimTime, timer: P::Timer) {
        self.timers.push((at.max(self.now), timer));
    }

    pub fn observe(&mut self, obs: P::Observation) {
        self.observations.push((self.now, self.me, obs));
    }
}

#[derive(Clone, Debug)]
pub struct Envelope {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: MessageKind,
    pub bytes: Rc<Vec<u8>>,
    pub trace: Trace,
}

#[derive(Clone, Debug)]
pub enum EventPayload<T> {
    Deliver(Envelope),
    Timer { node: NodeId, timer: T },
}

#[derive(Clone, Debug)]
pub struct NetEvent<T> {
    pub deliver_time: SimTime,
    pub sequence: u64,
    pub payload: EventPayload<T>,
}

impl<T> PartialEq for NetEvent<T> {
    fn eq(&self, other: &Self) -> bool {
        (self.deliver_time, self.sequence) == (other.deliver_time, other.sequence)
    }
}

impl<T> Eq for NetEvent<T> {}

impl<T> PartialOrd for NetEvent<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for NetEvent<T> {
    // Reversed: BinaryHeap is a max-heap, the earliest event must pop first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.deliver_time, other.sequence).cmp(&(self.deliver_time, self.sequence))
    }
}

/// One dispatched delivery.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogRecord {
    pub time: SimTime,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: MessageKind,
    pub size: usize,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {}", self.time, self.src, self.dst, self.kind.name(), self.size)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub delivered: u64,
    pub decode_errors: u64,
    pub events: u64,
    /// Point-to-point sends per message height.
    pub sent_per_height: BTreeMap<u64, u64>,
    pub sent_per_kind: BTreeMap<MessageKind, u64>,
}

/// The simulation: nodes, queue, clock, fault schedule.
pub struct Simulation<P: Process> {
    nodes: Vec<P>,
    queue: BinaryHeap<NetEvent<P::Timer>>,
    now: SimTime,
    sequence: u64,
    rng: ChaCha8Rng,
    faults: FaultSchedule,
    log: Option<Vec<LogRecord>>,
    observations: Vec<(SimTime, NodeId, P::Observation)>,
    stats: NetStats,
}

impl<P: Process> Simulation<P> {
    pub fn new(nodes: Vec<P>, faults: FaultSchedule, seed: u64, keep_log: bool) -> Result<Self, FaultError> {
        faults.validate()?;
        Ok(Simulation {
            nodes,
            queue: BinaryHeap::new(),
            now: 0,
            sequence: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7473_696d),
            faults,
            log: keep_log.then(Vec::new),
            observations: Vec::new(),
            stats: NetStats::default(),
        })
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn nodes(&self) -> &[P] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &P {
        &self.nodes[id as usize]
    }

    pub fn faults(&self) -> &FaultSchedule {
        &self.faults
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    pub fn log(&self) -> Option<&[LogRecord]> {
        self.log.as_deref()
    }

    pub fn observations(&self) -> &[(SimTime, NodeId, P::Observation)] {
        &self.observations
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn is_offline(&self, node: NodeId) -> bool {
        self.faults.is_offline(node, self.now)
    }

    fn push(&mut self, deliver_time: SimTime, payload: EventPayload<P::Timer>) {
        self.sequence += 1;
        self.queue.push(NetEvent {
            deliver_time,
            sequence: self.sequence,
            payload,
        });
    }

    pub fn schedule_timer(&mut self, at: SimTime, node: NodeId, timer: P::Timer) {
        self.push(at.max(self.now), EventPayload::Timer { node, timer });
    }

    /// Run one handler outside the event loop (bootstrap actions).
    pub fn invoke(&mut self, node: NodeId, f: impl FnOnce(&mut P, &mut Context<'_, P>)) {
        let mut sends = Vec::new();
        let mut timers = Vec::new();
        let mut obs = Vec::new();
        {
            let mut ctx = Context {
                now: self.now,
                me: node,
                cause: Trace::empty(),
                sends: &mut sends,
                timers: &mut timers,
                observations: &mut obs,
            };
            f(&mut self.nodes[node as usize], &mut ctx);
        }
        self.apply(node, sends, timers, obs);
    }

    fn apply(
        &mut self,
        node: NodeId,
        sends: Vec<Outgoing>,
        timers: Vec<(SimTime, P::Timer)>,
        obs: Vec<(SimTime, NodeId, P::Observation)>,
    ) {
        self.observations.extend(obs);
        for (at, timer) in timers {
            self.schedule_timer(at, node, timer);
        }
        for out in sends {
            let bytes = Rc::new(out.msg.to_bytes());
            let kind = out.msg.kind();
            let height = out.msg.height();
            let targets: Vec<NodeId> = match out.dest {
                Dest::To(n) => vec![n],
                Dest::Multicast(v) => v,
                Dest::Broadcast => (0..self.nodes.len() as NodeId).collect(),
            };
            for dst in targets {
                if dst as usize >= self.nodes.len() {
                    continue;
                }
                self.stats.sent += 1;
                *self.stats.sent_per_kind.entry(kind).or_default() += 1;
                if let Some(h) = height {
                    *self.stats.sent_per_height.entry(h).or_default() += 1;
                }
                let env = Envelope {
                    src: node,
                    dst,
                    kind,
                    bytes: bytes.clone(),
                    trace: out.trace.clone(),
                };
                self.transmit(env);
            }
        }
    }

    fn sample_delay(&mut self) -> SimTime {
        let Latency { base_ms, jitter_ms } = self.faults.latency;
        if jitter_ms == 0 {
            return base_ms;
        }
        let offset = self.rng.gen_range(0..=2 * jitter_ms);
        (base_ms + offset).saturating_sub(jitter_ms)
    }

    fn transmit(&mut self, env: Envelope) {
        let (src, dst) = (env.src, env.dst);
        if self.faults.is_offline(src, self.now) {
            self.stats.dropped += 1;
            return;
        }
        if src != dst {
            if self.faults.separated(src, dst, self.now) {
                self.stats.dropped += 1;
                return;
            }
            if self.faults.drop_rate > 0.0 && self.rng.gen_bool(self.faults.drop_rate) {
                self.stats.dropped += 1;
                return;
            }
        }
        let delay = self.sample_delay();
        let duplicate = src != dst
            && self.faults.duplicate_rate > 0.0
            && self.rng.gen_bool(self.faults.duplicate_rate);
        if duplicate {
            self.stats.duplicated += 1;
            let delay2 = self.sample_delay();
            self.push(self.now + delay2, EventPayload::Deliver(env.clone()));
        }
        self.push(self.now + delay, EventPayload::Deliver(env));
    }

    /// Dispatch the next event. Returns `false` when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(ev) = self.queue.pop() else {
            return false;
        };
        debug_assert!(ev.deliver_time >= self.now, "clock went backwards");
        self.now = ev.deliver_time;
        self.stats.events += 1;
        let mut sends = Vec::new();
        let mut timers = Vec::new();
        let mut obs = Vec::new();
        let node = match ev.payload {
            EventPayload::Timer { node, timer } => {
                let mut ctx = Context {
                    now: self.now,
                    me: node,
                    cause: Trace::empty(),
                    sends: &mut sends,
                    timers: &mut timers,
                    observations: &mut obs,
                };
                self.nodes[node as usize].on_timer(&mut ctx, timer);
                node
            }
            EventPayload::Deliver(env) => {
                if self.faults.is_offline(env.dst, self.now)
                    || (env.src != env.dst && self.faults.separated(env.src, env.dst, self.now))
                {
                    self.stats.dropped += 1;
                    return true;
                }
                self.stats.delivered += 1;
                if let Some(log) = &mut self.log {
                    log.push(LogRecord {
                        time: self.now,
                        src: env.src,
                        dst: env.dst,
                        kind: env.kind,
                        size: env.bytes.len(),
                    });
                }
                let msg = match ProtocolMessage::decode_bytes(&env.bytes) {
                    Ok(m) => m,
                    Err(_) => {
                        self.stats.decode_errors += 1;
                        return true;
                    }
                };
                let mut ctx = Context {
                    now: self.now,
                    me: env.dst,
                    cause: env.trace.clone(),
                    sends: &mut sends,
                    timers: &mut timers,
                    observations: &mut obs,
                };
                self.nodes[env.dst as usize].on_message(&mut ctx, env.src, msg);
                env.dst
            }
        };
        self.apply(node, sends, timers, obs);
        true
    }

    /// Inject raw bytes as if sent by `src` (used for fault tests).
    pub fn inject_raw(&mut self, src: NodeId, dst: NodeId, bytes: Vec<u8>, delay: SimTime) {
        let kind = bytes
            .first()
            .and_then(|t| MessageKind::from_tag(*t))
            .unwrap_or(MessageKind::Join);
        let env = Envelope {
            src,
            dst,
            kind,
            bytes: Rc::new(bytes),
            trace: Trace::empty(),
        };
        self.push(self.now + delay, EventPayload::Deliver(env));
    }

    pub fn into_nodes(self) -> Vec<P> {
        self.nodes
    }
}

/// Render an event log as text, one record per line.
pub fn render_log(records: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{r}");
    }
    out
}

/// Zero cross-group deliveries inside any partition window.
pub fn partition_sound(records: &[LogRecord], faults: &FaultSchedule) -> bool {
    records
        .iter()
        .all(|r| !faults.separated(r.src, r.dst, r.time))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::{BlockRequestMsg, ProtocolMessage};
    use crate::tee::{PublicKey, Signature};

    /// Records every delivery; on a delivery from node 0, echoes to node 2.
    #[derive(Default)]
    struct Echo {
        got: Vec<(SimTime, NodeId, u64)>,
    }

    fn req(n: u64) -> ProtocolMessage {
        ProtocolMessage::BlockRequest(BlockRequestMsg {
            from_height: n,
            pk: PublicKey::default(),
            sig: Signature::default(),
        })
    }

    impl Process for Echo {
        type Timer = u64;
        type Observation = ();

        fn on_message(&mut self, ctx: &mut Context<'_, Self>, from: NodeId, msg: ProtocolMessage) {
            if let ProtocolMessage::BlockRequest(m) = msg {
                self.got.push((ctx.now(), from, m.from_height));
            }
        }

        fn on_timer(&mut self, ctx: &mut Context<'_, Self>, timer: u64) {
            ctx.broadcast(req(timer));
        }
    }

    fn sim(faults: FaultSchedule) -> Simulation<Echo> {
        Simulation::new((0..3).map(|_| Echo::default()).collect(), faults, 1, true).unwrap()
    }

    fn run(s: &mut Simulation<Echo>) {
        while s.step() {}
    }

    #[test]
    fn fixed_latency_delivers_at_t_plus_200() {
        let mut s = sim(FaultSchedule::default());
        s.schedule_timer(1000, 0, 7);
        run(&mut s);
        for n in s.nodes() {
            assert_eq!(n.got, vec![(1200, 0, 7)]);
        }
    }

    #[test]
    fn full_drop_delivers_nothing_but_loopback() {
        let mut s = sim(FaultSchedule { drop_rate: 1.0, ..Default::default() });
        s.schedule_timer(0, 0, 1);
        run(&mut s);
        assert_eq!(s.node(0).got.len(), 1);
        assert!(s.node(1).got.is_empty() && s.node(2).got.is_empty());
    }

    #[test]
    fn partition_blocks_cross_group_only() {
        let faults = FaultSchedule {
            partitions: vec![PartitionWindow {
                groups: vec![vec![0, 1], vec![2]],
                start_ms: 0,
                end_ms: 10_000,
            }],
            ..Default::default()
        };
        let mut s = sim(faults.clone());
        s.schedule_timer(0, 0, 1);
        run(&mut s);
        assert_eq!(s.node(1).got.len(), 1);
        assert!(s.node(2).got.is_empty());
        assert!(partition_sound(s.log().unwrap(), &faults));
    }

    #[test]
    fn offline_destination_discards() {
        let faults = FaultSchedule {
            offline: vec![OfflineWindow { node: 1, start_ms: 100, end_ms: 300 }],
            ..Default::default()
        };
        let mut s = sim(faults);
        s.schedule_timer(0, 0, 1);
        run(&mut s);
        assert!(s.node(1).got.is_empty());
        assert_eq!(s.node(2).got.len(), 1);
    }

    #[test]
    fn equal_times_dispatch_in_sequence_order() {
        let mut s = sim(FaultSchedule::default());
        s.schedule_timer(0, 0, 1);
        s.schedule_timer(0, 1, 2);
        run(&mut s);
        let heights: Vec<u64> = s.node(2).got.iter().map(|g| g.2).collect();
        assert_eq!(heights, vec![1, 2]);
    }

    #[test]
    fn replay_is_identical() {
        let faults = FaultSchedule {
            drop_rate: 0.3,
            duplicate_rate: 0.2,
            latency: Latency { base_ms: 200, jitter_ms: 50 },
            ..Default::default()
        };
        let go = || {
            let mut s = sim(faults.clone());
            for t in 0..20 {
                s.schedule_timer(t * 10, (t % 3) as NodeId, t);
            }
            run(&mut s);
            render_log(s.log().unwrap())
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn jitter_stays_in_bounds() {
        let faults = FaultSchedule {
            latency: Latency { base_ms: 200, jitter_ms: 50 },
            ..Default::default()
        };
        let mut s = sim(faults);
        for t in 0..50 {
            s.schedule_timer(0, 0, t);
        }
        run(&mut s);
        for (time, from, _) in &s.node(1).got {
            assert_eq!(*from, 0);
            assert!((150..=250).contains(time), "{time}");
        }
    }

    #[test]
    fn malformed_bytes_dropped() {
        let mut s = sim(FaultSchedule::default());
        s.inject_raw(0, 1, vec![0x0a, 1, 2], 5);
        run(&mut s);
        assert_eq!(s.stats().decode_errors, 1);
        assert!(s.node(1).got.is_empty());
    }

    #[test]
    fn overlapping_groups_rejected() {
        let faults = FaultSchedule {
            partitions: vec![PartitionWindow { groups: vec![vec![0, 1], vec![1]], start_ms: 0, end_ms: 1 }],
            ..Default::default()
        };
        assert_eq!(faults.validate(), Err(FaultError::OverlappingGroups { node: 1 }));
    }

    #[test]
    fn trace_phases_merge_relays() {
        use MessageKind::*;
        let t = [Elect, ElectVote, ElectVote, Propose, AcceptVote, Confirm]
            .into_iter()
            .fold(Trace::empty(), |t, k| t.extended(k));
        assert_eq!(t.hops().len(), 6);
        assert_eq!(t.phases(), vec![Elect, ElectVote, Propose, AcceptVote, Confirm]);
    }
}
