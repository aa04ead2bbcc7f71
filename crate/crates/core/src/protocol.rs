//! The dual-mode actor state machine: mailbox states, sync programs, the
//! request/reply/unsync handshake, lessee registration and channel activation.
//!
//! A [`Mailbox`] never talks to the network directly. Handlers push sequenced
//! messages, trace events and lifecycle requests into [`Effects`], which the
//! runtime applies.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::DmaError;
use crate::model::{
    BarrierId, BarrierSpec, ChannelId, ControlKind, CriticalEvent, Event, FunctionAddress, Granularity,
    InstanceAddress, MessageKind, Payload, SeqCounters, SequencedMessage, SimTime,
};
use crate::state::{consolidate, read_state_snapshot, CombiningFunction, ManagedState, PartialState};
use crate::trace::{TraceEvent, TraceKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MailboxState {
    Runnable,
    Blocked,
    Critical,
}

impl MailboxState {
    pub fn as_str(&self) -> &'static str {
        match self {
            MailboxState::Runnable => "RUNNABLE",
            MailboxState::Blocked => "BLOCKED",
            MailboxState::Critical => "CRITICAL",
        }
    }
}

/// Deliberately broken protocol variants, used to show the checker can tell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mutants {
    pub drop_request_ack: bool,
    pub skip_lessee_dependency_wait: bool,
    pub register_while_blocked: bool,
    pub unsync_before_sp_ack: bool,
    pub criticals_at_lessee: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mutant {
    DropSyncRequestAck,
    SkipLesseeDependencyWait,
    RegisterWhileBlocked,
    UnsyncBeforeSpAck,
    CriticalsAtLessee,
}

impl Mutant {
    pub const ALL: [Mutant; 5] = [
        Mutant::DropSyncRequestAck,
        Mutant::SkipLesseeDependencyWait,
        Mutant::RegisterWhileBlocked,
        Mutant::UnsyncBeforeSpAck,
        Mutant::CriticalsAtLessee,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mutant::DropSyncRequestAck => "drop-sync-request-ack",
            Mutant::SkipLesseeDependencyWait => "skip-lessee-dependency-wait",
            Mutant::RegisterWhileBlocked => "register-while-blocked",
            Mutant::UnsyncBeforeSpAck => "unsync-before-sp-ack",
            Mutant::CriticalsAtLessee => "criticals-at-lessee",
        }
    }

    pub fn parse(s: &str) -> Option<Mutant> {
        Mutant::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn enable(self, m: &mut Mutants) {
        match self {
            Mutant::DropSyncRequestAck => m.drop_request_ack = true,
            Mutant::SkipLesseeDependencyWait => m.skip_lessee_dependency_wait = true,
            Mutant::RegisterWhileBlocked => m.register_while_blocked = true,
            Mutant::UnsyncBeforeSpAck => m.unsync_before_sp_ack = true,
            Mutant::CriticalsAtLessee => m.criticals_at_lessee = true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProtocolConfig {
    /// UNSYNC carries the consolidated state so lessees can serve reads.
    pub read_heavy: bool,
    pub mutants: Mutants,
    pub list_limit: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { read_heavy: false, mutants: Mutants::default(), list_limit: crate::state::DEFAULT_LIST_LIMIT }
    }
}

/// Static per-function facts a mailbox needs.
#[derive(Clone, Debug)]
pub struct FunctionWiring {
    pub function: FunctionAddress,
    pub upstreams: Vec<FunctionAddress>,
    pub downstream_lessors: BTreeMap<FunctionAddress, InstanceAddress>,
    pub combining: CombiningFunction,
    pub initial_state: ManagedState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncProgram {
    /// The sending lessor's barrier (or source epoch) this program belongs to.
    pub barrier: BarrierId,
    pub granularity: Granularity,
    pub blocked_upstreams: Vec<FunctionAddress>,
    pub dependency_payload: BTreeMap<ChannelId, u64>,
    /// Critical messages merged into the program envelope.
    pub criticals: Vec<SequencedMessage>,
}

impl SyncProgram {
    pub fn barrier_spec(&self) -> BarrierSpec {
        BarrierSpec {
            granularity: self.granularity,
            critical_messages: self.criticals.clone(),
            dependency_payload: self.dependency_payload.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncRequest {
    pub barrier: BarrierId,
    pub blocked_upstreams: Vec<FunctionAddress>,
    pub dependency_payload: BTreeMap<ChannelId, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncReply {
    pub barrier: BarrierId,
    pub partial: PartialState,
    pub downstream_last_sent: BTreeMap<ChannelId, u64>,
}

/// A message sitting in a mailbox queue.
#[derive(Clone, Debug, PartialEq)]
pub struct Queued {
    pub msg: SequencedMessage,
    /// Runtime-wide arrival stamp; orders withheld drains.
    pub arrival: u64,
    pub enqueued_at: SimTime,
}

/// Side effects of a handler, applied by the runtime.
#[derive(Debug, Default)]
pub struct Effects {
    pub now: SimTime,
    pub out: Vec<SequencedMessage>,
    pub trace: Vec<TraceEvent>,
    /// Lessees to instantiate before any of `out` is delivered.
    pub create: Vec<InstanceAddress>,
    pub violations: Vec<DmaError>,
}

impl Effects {
    pub fn new(now: SimTime) -> Self {
        Self { now, ..Default::default() }
    }

    pub fn ev(&self, at: InstanceAddress, kind: TraceKind) -> TraceEvent {
        TraceEvent::new(self.now, at, kind)
    }

    pub fn emit(&mut self, e: TraceEvent) {
        self.trace.push(e);
    }

    fn violation(&mut self, at: InstanceAddress, reason: String) {
        self.emit(self.ev(at, TraceKind::Violation { reason: reason.clone() }));
        self.violations.push(DmaError::at(at, reason));
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Inbound {
    delivered_through: Option<u64>,
    active: bool,
}

#[derive(Clone, Debug, PartialEq)]
enum Outbound {
    Active,
    Registering(Vec<Event>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BarrierPhase {
    Buffering,
    Blocked,
    Critical,
}

#[derive(Clone, Debug)]
struct Program {
    sender: InstanceAddress,
    sp: SyncProgram,
}

#[derive(Clone, Debug)]
struct LessorBarrier {
    id: BarrierId,
    granularity: Granularity,
    programs: Vec<Program>,
    expected: BTreeSet<FunctionAddress>,
    phase: BarrierPhase,
    participants: Vec<InstanceAddress>,
    acks_pending: BTreeSet<InstanceAddress>,
    sp_acked: bool,
    replies: BTreeMap<InstanceAddress, SyncReply>,
    collected: BTreeMap<FunctionAddress, Vec<CriticalEvent>>,
    criticals_done: bool,
    held: Vec<FunctionAddress>,
    awaiting_downstream: BTreeSet<FunctionAddress>,
}

impl LessorBarrier {
    fn program_functions(&self) -> BTreeSet<FunctionAddress> {
        self.programs.iter().map(|p| p.sp.barrier.function).collect()
    }
}

#[derive(Clone, Debug, Default)]
struct LessorSide {
    lessees: BTreeSet<InstanceAddress>,
    barrier: Option<LessorBarrier>,
    queued: VecDeque<Program>,
    deferred: VecDeque<(InstanceAddress, InstanceAddress)>,
    seen: BTreeSet<BarrierId>,
}

#[derive(Clone, Debug)]
struct LesseeSync {
    barrier: BarrierId,
    blocked: Vec<FunctionAddress>,
    payload: BTreeMap<ChannelId, u64>,
    replied: bool,
}

#[derive(Clone, Debug)]
struct LesseeSide {
    lessor: InstanceAddress,
    sync: Option<LesseeSync>,
}

#[derive(Clone, Debug)]
enum SourceOp {
    Data(InstanceAddress, Event),
    Critical(BarrierId, Vec<(FunctionAddress, CriticalEvent)>),
}

/// Ingress ordering: after a critical, later sends wait until every
/// downstream lessor has acknowledged the sync program.
#[derive(Clone, Debug, Default)]
struct SourceSide {
    barrier: Option<BarrierId>,
    awaiting: BTreeSet<FunctionAddress>,
    queue: VecDeque<SourceOp>,
}

#[derive(Clone, Debug)]
enum Role {
    Source(SourceSide),
    Lessor(Box<LessorSide>),
    Lessee(LesseeSide),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Admit,
    Withhold,
}

/// One physical instance: its mailbox queues, DMA role state, outbound
/// sequencing and partial state.
#[derive(Clone, Debug)]
pub struct Mailbox {
    pub owner: InstanceAddress,
    state: MailboxState,
    wiring: Arc<FunctionWiring>,
    cfg: ProtocolConfig,
    ready: VecDeque<Queued>,
    criticals: VecDeque<Queued>,
    withheld: BTreeMap<u64, Queued>,
    releasing: Vec<Queued>,
    executing: Option<Queued>,
    inbound: BTreeMap<ChannelId, Inbound>,
    counters: SeqCounters,
    outbound: BTreeMap<InstanceAddress, Outbound>,
    pub partial: PartialState,
    pub read_view: Option<ManagedState>,
    epoch: u64,
    role: Role,
}

impl Mailbox {
    fn base(owner: InstanceAddress, wiring: Arc<FunctionWiring>, cfg: ProtocolConfig, role: Role) -> Self {
        let partial = PartialState::new(owner, wiring.initial_state.clone());
        Self {
            owner,
            state: MailboxState::Runnable,
            wiring,
            cfg,
            ready: VecDeque::new(),
            criticals: VecDeque::new(),
            withheld: BTreeMap::new(),
            releasing: Vec::new(),
            executing: None,
            inbound: BTreeMap::new(),
            counters: SeqCounters::new(),
            outbound: BTreeMap::new(),
            partial,
            read_view: None,
            epoch: 0,
            role,
        }
    }

    pub fn new_lessor(owner: InstanceAddress, wiring: Arc<FunctionWiring>, cfg: ProtocolConfig) -> Self {
        assert!(owner.is_lessor());
        Self::base(owner, wiring, cfg, Role::Lessor(Box::default()))
    }

    pub fn new_lessee(
        owner: InstanceAddress,
        lessor: InstanceAddress,
        wiring: Arc<FunctionWiring>,
        cfg: ProtocolConfig,
    ) -> Self {
        assert!(!owner.is_lessor());
        Self::base(owner, wiring, cfg, Role::Lessee(LesseeSide { lessor, sync: None }))
    }

    /// A workload ingress: sends only, never blocks.
    pub fn new_source(owner: InstanceAddress, wiring: Arc<FunctionWiring>, cfg: ProtocolConfig) -> Self {
        Self::base(owner, wiring, cfg, Role::Source(SourceSide::default()))
    }

    pub fn state(&self) -> MailboxState {
        self.state
    }

    pub fn wiring(&self) -> &FunctionWiring {
        &self.wiring
    }

    pub fn is_source(&self) -> bool {
        matches!(self.role, Role::Source(_))
    }

    pub fn lessees(&self) -> Vec<InstanceAddress> {
        match &self.role {
            Role::Lessor(l) => l.lessees.iter().copied().collect(),
            _ => Vec::new(),
        }
    }

    pub fn barrier_phase(&self) -> Option<BarrierPhase> {
        match &self.role {
            Role::Lessor(l) => l.barrier.as_ref().map(|b| b.phase),
            _ => None,
        }
    }

    pub fn current_barrier(&self) -> Option<BarrierId> {
        match &self.role {
            Role::Lessor(l) => l.barrier.as_ref().map(|b| b.id),
            Role::Lessee(l) => l.sync.as_ref().map(|s| s.barrier),
            Role::Source(_) => None,
        }
    }

    pub fn ready_len(&self) -> usize {
        self.ready.len() + self.criticals.len()
    }

    pub fn withheld_len(&self) -> usize {
        self.withheld.len()
    }

    pub fn withheld_data(&self) -> impl Iterator<Item = &Queued> {
        self.withheld.values()
    }

    pub fn ready_data_len(&self) -> usize {
        self.ready.iter().filter(|q| q.msg.kind == MessageKind::Data).count()
    }

    /// Data held back while a lessee registration is outstanding.
    pub fn buffered_len(&self) -> usize {
        let held = match &self.role {
            Role::Source(s) => s.queue.iter().filter(|op| matches!(op, SourceOp::Data(..))).count(),
            _ => 0,
        };
        held + self
            .outbound
            .values()
            .map(|o| match o {
                Outbound::Registering(b) => b.len(),
                Outbound::Active => 0,
            })
            .sum::<usize>()
    }

    pub fn is_executing(&self) -> bool {
        self.executing.is_some()
    }

    /// Nothing queued, running, withheld or owed.
    pub fn is_quiescent(&self) -> bool {
        let role_idle = match &self.role {
            Role::Lessor(l) => l.barrier.is_none() && l.queued.is_empty() && l.deferred.is_empty(),
            Role::Lessee(l) => l.sync.is_none(),
            Role::Source(s) => s.awaiting.is_empty() && s.queue.is_empty(),
        };
        role_idle
            && self.ready.is_empty()
            && self.criticals.is_empty()
            && self.withheld.is_empty()
            && self.releasing.is_empty()
            && self.executing.is_none()
            && !self.outbound.values().any(|o| matches!(o, Outbound::Registering(_)))
    }

    /// Human-readable stage for stuck-barrier reports.
    pub fn stage(&self) -> String {
        match &self.role {
            Role::Lessor(l) => match &l.barrier {
                None => format!("{} idle", self.state.as_str()),
                Some(b) => format!(
                    "{} {:?} programs={}/{} acks_pending={} replies={}/{} downstream_acks={}",
                    self.state.as_str(),
                    b.phase,
                    b.program_functions().len(),
                    b.expected.len(),
                    b.acks_pending.len(),
                    b.replies.len(),
                    b.participants.len(),
                    b.awaiting_downstream.len()
                ),
            },
            Role::Lessee(l) => match &l.sync {
                None => format!("{} idle", self.state.as_str()),
                Some(s) => format!("{} replied={}", self.state.as_str(), s.replied),
            },
            Role::Source(s) => format!("source awaiting={} queued={}", s.awaiting.len(), s.queue.len()),
        }
    }

    /// Marks a channel from an upstream lessee as active (setup-time leases).
    pub fn activate_inbound(&mut self, channel: ChannelId) {
        self.inbound.entry(channel).or_default().active = true;
    }

    /// Marks an outbound channel to a downstream lessee as registered (setup-time leases).
    pub fn activate_outbound(&mut self, target: InstanceAddress) {
        self.counters.register(ChannelId::new(self.owner, target));
        self.outbound.insert(target, Outbound::Active);
    }

    /// Adds a lessee without any registration exchange.
    pub fn add_lessee(&mut self, lessee: InstanceAddress) -> Result<bool, DmaError> {
        let owner = self.owner;
        let Role::Lessor(l) = &mut self.role else {
            return Err(DmaError::at(owner, "only lessors hold leases"));
        };
        if lessee.function != owner.function || lessee.is_lessor() {
            return Err(DmaError::at(owner, format!("{lessee} cannot be a lessee here")));
        }
        if let Some(other) = l.lessees.iter().find(|x| x.index == lessee.index && x.worker != lessee.worker) {
            return Err(DmaError::at(owner, format!("lessee index {} already placed as {other}", lessee.index)));
        }
        let fresh = l.lessees.insert(lessee);
        self.counters.register(ChannelId::new(owner, lessee));
        Ok(fresh)
    }

    pub fn last_sent(&self) -> BTreeMap<ChannelId, u64> {
        self.counters.sent().collect()
    }

    // ---------------------------------------------------------------- sending

    fn transmit(&mut self, target: InstanceAddress, payload: Payload, fx: &mut Effects) -> Result<u64, DmaError> {
        let channel = ChannelId::new(self.owner, target);
        let kind = payload.kind();
        if target.is_lessor() || matches!(kind, MessageKind::Control(_)) {
            self.counters.register(channel);
        }
        let seq = self.counters.next_seq_id(channel)?;
        let msg = SequencedMessage {
            channel,
            seq_id: seq,
            kind,
            logical_time: match &payload {
                Payload::Event(e) => Some(e.event_time),
                Payload::Critical(c) => Some(c.ts),
                _ => None,
            },
            payload,
        };
        fx.emit(
            fx.ev(self.owner, TraceKind::Send(kind))
                .on(channel, seq)
                .msg(msg.msg_id())
                .maybe_barrier(control_barrier(&msg.payload)),
        );
        fx.out.push(msg);
        Ok(seq)
    }

    /// Sends a data event, registering with the target's lessor first when the
    /// target is a lessee on an inactive channel.
    pub fn send_data(&mut self, target: InstanceAddress, event: Event, fx: &mut Effects) -> Result<(), DmaError> {
        if let Role::Source(s) = &mut self.role {
            if !s.awaiting.is_empty() || !s.queue.is_empty() {
                s.queue.push_back(SourceOp::Data(target, event));
                return Ok(());
            }
        }
        self.send_now(target, event, fx)
    }

    fn send_now(&mut self, target: InstanceAddress, event: Event, fx: &mut Effects) -> Result<(), DmaError> {
        if target.is_lessor() {
            self.transmit(target, Payload::Event(event), fx)?;
            return Ok(());
        }
        match self.outbound.get_mut(&target) {
            Some(Outbound::Active) => {
                self.transmit(target, Payload::Event(event), fx)?;
            }
            Some(Outbound::Registering(buf)) => buf.push(event),
            None => {
                let lessor = self.lessor_of(target.function)?;
                self.outbound.insert(target, Outbound::Registering(vec![event]));
                self.transmit(lessor, Payload::LesseeRegistration { upstream: self.owner, lessee: target }, fx)?;
            }
        }
        Ok(())
    }

    fn lessor_of(&self, f: FunctionAddress) -> Result<InstanceAddress, DmaError> {
        self.wiring
            .downstream_lessors
            .get(&f)
            .copied()
            .ok_or_else(|| DmaError::at(self.owner, format!("no edge to {}/{}", f.job.0, f.function.0)))
    }

    fn registering_to(&self, f: FunctionAddress) -> bool {
        self.outbound.iter().any(|(t, o)| t.function == f && matches!(o, Outbound::Registering(_)))
    }

    /// Emits one sync program with merged critical messages to `target_fn`'s lessor.
    fn send_program(
        &mut self,
        target_fn: FunctionAddress,
        barrier: BarrierId,
        events: Vec<CriticalEvent>,
        lessee_last_sent: &[&BTreeMap<ChannelId, u64>],
        fx: &mut Effects,
    ) -> Result<(), DmaError> {
        let lessor = self.lessor_of(target_fn)?;
        let mut payload: BTreeMap<ChannelId, u64> =
            self.counters.sent().filter(|(c, _)| c.target.function == target_fn).collect();
        for m in lessee_last_sent {
            payload.extend(m.iter().filter(|(c, _)| c.target.function == target_fn).map(|(c, s)| (*c, *s)));
        }
        let channel = ChannelId::new(self.owner, lessor);
        self.counters.register(channel);
        let granularity = Granularity::for_critical(events[0].kind);
        let mut criticals = Vec::with_capacity(events.len());
        for e in events {
            let seq = self.counters.next_seq_id(channel)?;
            fx.emit(
                fx.ev(self.owner, TraceKind::Send(MessageKind::Critical))
                    .on(channel, seq)
                    .msg(Some(e.id))
                    .barrier(barrier),
            );
            criticals.push(SequencedMessage {
                channel,
                seq_id: seq,
                kind: MessageKind::Critical,
                logical_time: Some(e.ts),
                payload: Payload::Critical(e),
            });
        }
        let sp = SyncProgram {
            barrier,
            granularity,
            blocked_upstreams: vec![self.owner.function],
            dependency_payload: payload,
            criticals,
        };
        self.transmit(lessor, Payload::SyncProgram(Box::new(sp)), fx)?;
        Ok(())
    }

    /// Source-side critical injection: one program per downstream function,
    /// each carrying its own copy of the critical.
    pub fn inject_critical(
        &mut self,
        events: Vec<(FunctionAddress, CriticalEvent)>,
        fx: &mut Effects,
    ) -> Result<(), DmaError> {
        if !self.is_source() {
            return Err(DmaError::at(self.owner, "critical injection at a non-source"));
        }
        self.epoch += 1;
        let barrier = BarrierId { function: self.owner.function, epoch: self.epoch };
        let Role::Source(s) = &mut self.role else { unreachable!() };
        s.queue.push_back(SourceOp::Critical(barrier, events));
        self.progress_source(fx)
    }

    fn progress_source(&mut self, fx: &mut Effects) -> Result<(), DmaError> {
        loop {
            let Role::Source(s) = &self.role else { unreachable!() };
            if !s.awaiting.is_empty() {
                return Ok(());
            }
            match s.queue.front() {
                None => return Ok(()),
                // pre-critical data still waiting on a registration must go first
                Some(SourceOp::Critical(_, events)) if events.iter().any(|(f, _)| self.registering_to(*f)) => {
                    return Ok(())
                }
                Some(_) => {}
            }
            let Role::Source(s) = &mut self.role else { unreachable!() };
            match s.queue.pop_front().expect("non-empty") {
                SourceOp::Data(target, event) => self.send_now(target, event, fx)?,
                SourceOp::Critical(barrier, events) => {
                    let fns: BTreeSet<FunctionAddress> = events.iter().map(|(f, _)| *f).collect();
                    for (f, e) in events {
                        self.send_program(f, barrier, vec![e], &[], fx)?;
                    }
                    let Role::Source(s) = &mut self.role else { unreachable!() };
                    s.barrier = Some(barrier);
                    s.awaiting = fns;
                }
            }
        }
    }

    // -------------------------------------------------------------- receiving

    /// Fetcher entry point. Returns the message when it is admitted for
    /// scheduling; control messages are consumed and withheld data is kept.
    pub fn receive(
        &mut self,
        msg: SequencedMessage,
        arrival: u64,
        fx: &mut Effects,
    ) -> Result<Option<Queued>, DmaError> {
        let c = msg.channel;
        if c.target != self.owner {
            return Err(DmaError::at(self.owner, format!("misrouted message on {c}")));
        }
        {
            let entry = self.inbound.entry(c).or_default();
            entry.delivered_through = Some(entry.delivered_through.map_or(msg.seq_id, |d| d.max(msg.seq_id)));
        }
        fx.emit(
            fx.ev(self.owner, TraceKind::Deliver(msg.kind))
                .on(c, msg.seq_id)
                .msg(msg.msg_id())
                .maybe_barrier(control_barrier(&msg.payload)),
        );
        let from = c.source;
        match msg.payload {
            Payload::SyncProgram(sp) => self.on_sync_program(from, *sp, fx).map(|_| None),
            Payload::SyncRequest(r) => self.on_sync_request(from, r, fx).map(|_| None),
            Payload::SyncRequestAck { barrier } => self.on_request_ack(from, barrier).map(|_| None),
            Payload::SyncReply(r) => self.on_sync_reply(from, *r).map(|_| None),
            Payload::Unsync { barrier, state } => self.on_unsync(from, barrier, state, fx).map(|_| None),
            Payload::LesseeRegistration { upstream, lessee } => {
                self.on_registration(from, upstream, lessee, fx).map(|_| None)
            }
            Payload::LesseeRegistrationAck { lessee } => self.on_registration_ack(lessee, fx).map(|_| None),
            Payload::SpAck { barrier } => self.on_sp_ack(from, barrier).map(|_| None),
            Payload::Event(_) | Payload::Critical(_) => {
                if self.is_source() {
                    return Err(DmaError::at(self.owner, "sources do not receive data"));
                }
                let q = Queued { msg, arrival, enqueued_at: fx.now };
                let class = self.classify(&q.msg);
                if class == Class::Admit && self.arrived_on_inactive(&q.msg) {
                    fx.violation(self.owner, format!("data on deactivated channel {c}"));
                }
                match class {
                    Class::Admit => Ok(Some(q)),
                    Class::Withhold => {
                        fx.emit(fx.ev(self.owner, TraceKind::Withhold).on(c, q.msg.seq_id).msg(q.msg.msg_id()));
                        self.withheld.insert(q.arrival, q);
                        Ok(None)
                    }
                }
            }
        }
    }

    fn arrived_on_inactive(&self, msg: &SequencedMessage) -> bool {
        let src = msg.channel.source;
        matches!(self.role, Role::Lessee(_))
            && msg.kind == MessageKind::Data
            && !src.is_lessor()
            && src.function != self.owner.function
            && !self.inbound.get(&msg.channel).is_some_and(|i| i.active)
    }

    /// DMA admission of a data or critical message.
    fn classify(&self, msg: &SequencedMessage) -> Class {
        let c = msg.channel;
        let src_fn = c.source.function;
        match &self.role {
            Role::Source(_) => Class::Withhold,
            Role::Lessor(l) => {
                if self.state != MailboxState::Runnable {
                    return Class::Withhold;
                }
                let active = l.barrier.iter().flat_map(|b| b.programs.iter());
                for p in active.chain(l.queued.iter()) {
                    if p.sp.barrier.function != src_fn {
                        continue;
                    }
                    match p.sp.dependency_payload.get(&c) {
                        Some(&s) if msg.seq_id <= s => {}
                        _ => return Class::Withhold,
                    }
                }
                Class::Admit
            }
            Role::Lessee(l) => {
                if self.state != MailboxState::Runnable {
                    return Class::Withhold;
                }
                if let Some(sync) = &l.sync {
                    if sync.blocked.contains(&src_fn) || c.source == l.lessor {
                        return match sync.payload.get(&c) {
                            Some(&s) if msg.seq_id <= s => Class::Admit,
                            _ => Class::Withhold,
                        };
                    }
                }
                Class::Admit
            }
        }
    }

    /// Moves ready messages that no longer pass admission back to the withheld set.
    fn reclassify_ready(&mut self, fx: &mut Effects) {
        let ready = std::mem::take(&mut self.ready);
        for q in ready {
            if self.classify(&q.msg) == Class::Withhold {
                fx.emit(fx.ev(self.owner, TraceKind::Withhold).on(q.msg.channel, q.msg.seq_id).msg(q.msg.msg_id()));
                self.withheld.insert(q.arrival, q);
            } else {
                self.ready.push_back(q);
            }
        }
    }

    fn withhold_all_ready(&mut self, fx: &mut Effects) {
        for q in std::mem::take(&mut self.ready) {
            fx.emit(fx.ev(self.owner, TraceKind::Withhold).on(q.msg.channel, q.msg.seq_id).msg(q.msg.msg_id()));
            self.withheld.insert(q.arrival, q);
        }
    }

    /// Re-runs admission over withheld messages in arrival order.
    fn readmit(&mut self, fx: &mut Effects) {
        let keys: Vec<u64> = self.withheld.keys().copied().collect();
        for k in keys {
            if self.classify(&self.withheld[&k].msg) == Class::Admit {
                let q = self.withheld.remove(&k).expect("present");
                fx.emit(fx.ev(self.owner, TraceKind::Release).on(q.msg.channel, q.msg.seq_id).msg(q.msg.msg_id()));
                self.releasing.push(q);
            }
        }
    }

    /// Messages readmitted by the last handler; the runtime passes them back
    /// through the strategy's enqueue hook.
    pub fn take_released(&mut self) -> Vec<Queued> {
        std::mem::take(&mut self.releasing)
    }

    pub fn accept(&mut self, mut q: Queued, fx: &mut Effects) {
        q.enqueued_at = fx.now;
        fx.emit(fx.ev(self.owner, TraceKind::Enqueue).on(q.msg.channel, q.msg.seq_id).msg(q.msg.msg_id()));
        self.ready.push_back(q);
    }

    /// Whether a strategy's Forward decision may be honored now.
    pub fn can_forward(&self) -> bool {
        match &self.role {
            Role::Lessor(l) => self.state == MailboxState::Runnable && l.barrier.is_none() && l.queued.is_empty(),
            _ => false,
        }
    }

    /// Re-addresses an admitted message to a lessee, creating the lease if new.
    pub fn forward(&mut self, q: Queued, lessee: InstanceAddress, fx: &mut Effects) -> Result<(), DmaError> {
        if !self.can_forward() {
            return Err(DmaError::at(self.owner, "forwarding while a barrier is active"));
        }
        if self.add_lessee(lessee)? {
            fx.create.push(lessee);
        }
        fx.emit(
            fx.ev(self.owner, TraceKind::Forward { to: lessee }).on(q.msg.channel, q.msg.seq_id).msg(q.msg.msg_id()),
        );
        self.transmit(lessee, q.msg.payload, fx)?;
        Ok(())
    }

    // ---------------------------------------------------------- control paths

    fn on_sync_program(&mut self, from: InstanceAddress, sp: SyncProgram, fx: &mut Effects) -> Result<(), DmaError> {
        let owner = self.owner;
        let upstreams = self.wiring.upstreams.clone();
        let Role::Lessor(l) = &mut self.role else {
            return Err(DmaError::at(owner, "sync program delivered to a non-lessor"));
        };
        sp.barrier_spec().validate()?;
        if !l.seen.insert(sp.barrier) {
            tracing::warn!(at = %owner, barrier = %sp.barrier, "duplicate sync program dropped");
            return Ok(());
        }
        let program = Program { sender: from, sp };
        let f = program.sp.barrier.function;
        match &mut l.barrier {
            None => {
                self.start_barrier(vec![program], &upstreams, fx)?;
            }
            Some(b) => {
                let joins = b.granularity == Granularity::SyncOne
                    && program.sp.granularity == Granularity::SyncOne
                    && b.phase == BarrierPhase::Buffering
                    && b.expected.contains(&f)
                    && !b.program_functions().contains(&f);
                if joins {
                    b.programs.push(program);
                } else if program.sp.granularity != b.granularity && !b.program_functions().contains(&f) {
                    return Err(DmaError::at(owner, "overlapping barriers of mixed granularity are not supported"));
                } else {
                    l.queued.push_back(program);
                }
            }
        }
        self.reclassify_ready(fx);
        Ok(())
    }

    fn start_barrier(
        &mut self,
        mut programs: Vec<Program>,
        upstreams: &[FunctionAddress],
        fx: &mut Effects,
    ) -> Result<(), DmaError> {
        let owner = self.owner;
        self.epoch += 1;
        let id = BarrierId { function: owner.function, epoch: self.epoch };
        let Role::Lessor(l) = &mut self.role else { unreachable!() };
        let granularity = programs[0].sp.granularity;
        if granularity == Granularity::SyncOne {
            // pull in queued programs from other upstream functions
            let mut have: BTreeSet<FunctionAddress> = programs.iter().map(|p| p.sp.barrier.function).collect();
            let mut rest = VecDeque::new();
            while let Some(p) = l.queued.pop_front() {
                let f = p.sp.barrier.function;
                if p.sp.granularity == Granularity::SyncOne && !have.contains(&f) {
                    have.insert(f);
                    programs.push(p);
                } else {
                    rest.push_back(p);
                }
            }
            l.queued = rest;
        }
        let expected: BTreeSet<FunctionAddress> = match granularity {
            Granularity::SyncChannel => [programs[0].sp.barrier.function].into(),
            Granularity::SyncOne => upstreams.iter().copied().collect(),
        };
        for p in &programs {
            if !expected.contains(&p.sp.barrier.function) {
                return Err(DmaError::at(owner, "sync program from a function that is not upstream"));
            }
        }
        fx.emit(
            fx.ev(owner, TraceKind::BarrierStart { programs: programs.iter().map(|p| p.sp.barrier).collect() })
                .barrier(id),
        );
        l.barrier = Some(LessorBarrier {
            id,
            granularity,
            programs,
            expected,
            phase: BarrierPhase::Buffering,
            participants: Vec::new(),
            acks_pending: BTreeSet::new(),
            sp_acked: false,
            replies: BTreeMap::new(),
            collected: BTreeMap::new(),
            criticals_done: false,
            held: Vec::new(),
            awaiting_downstream: BTreeSet::new(),
        });
        Ok(())
    }

    fn on_sync_request(&mut self, from: InstanceAddress, r: SyncRequest, fx: &mut Effects) -> Result<(), DmaError> {
        let owner = self.owner;
        let drop_ack = self.cfg.mutants.drop_request_ack;
        let Role::Lessee(l) = &mut self.role else {
            return Err(DmaError::at(owner, "sync request delivered to a non-lessee"));
        };
        if from != l.lessor {
            return Err(DmaError::at(owner, format!("sync request from {from}, not this lessee's lessor")));
        }
        if l.sync.is_some() {
            return Err(DmaError::at(owner, "sync request while already synchronizing"));
        }
        if let Some(c) = r.dependency_payload.keys().find(|c| c.target != owner) {
            return Err(DmaError::at(owner, format!("payload names foreign channel {c}")));
        }
        l.sync = Some(LesseeSync {
            barrier: r.barrier,
            blocked: r.blocked_upstreams,
            payload: r.dependency_payload,
            replied: false,
        });
        if !drop_ack {
            self.transmit(from, Payload::SyncRequestAck { barrier: r.barrier }, fx)?;
        }
        self.reclassify_ready(fx);
        Ok(())
    }

    fn on_request_ack(&mut self, from: InstanceAddress, barrier: BarrierId) -> Result<(), DmaError> {
        let owner = self.owner;
        let b = self.active_barrier_mut(barrier)?;
        if !b.acks_pending.remove(&from) && !b.participants.contains(&from) {
            return Err(DmaError::at(owner, format!("request ack from non-participant {from}")));
        }
        Ok(())
    }

    fn on_sync_reply(&mut self, from: InstanceAddress, reply: SyncReply) -> Result<(), DmaError> {
        let owner = self.owner;
        let b = self.active_barrier_mut(reply.barrier)?;
        if b.phase != BarrierPhase::Blocked || !b.participants.contains(&from) {
            return Err(DmaError::at(owner, format!("unexpected sync reply from {from}")));
        }
        if b.replies.insert(from, reply).is_some() {
            return Err(DmaError::at(owner, format!("duplicate sync reply from {from}")));
        }
        Ok(())
    }

    fn active_barrier_mut(&mut self, id: BarrierId) -> Result<&mut LessorBarrier, DmaError> {
        let owner = self.owner;
        match &mut self.role {
            Role::Lessor(l) => match &mut l.barrier {
                Some(b) if b.id == id => Ok(b),
                _ => Err(DmaError::at(owner, format!("message for inactive barrier {id}"))),
            },
            _ => Err(DmaError::at(owner, "barrier control message at a non-lessor")),
        }
    }

    fn on_unsync(
        &mut self,
        from: InstanceAddress,
        barrier: BarrierId,
        state: Option<ManagedState>,
        fx: &mut Effects,
    ) -> Result<(), DmaError> {
        let owner = self.owner;
        let Role::Lessee(l) = &mut self.role else {
            return Err(DmaError::at(owner, "unsync at a non-lessee"));
        };
        match &l.sync {
            Some(s) if s.barrier == barrier && s.replied && from == l.lessor => {}
            _ => return Err(DmaError::at(owner, format!("unexpected unsync for {barrier}"))),
        }
        l.sync = None;
        self.set_state(MailboxState::Runnable, Some(barrier), fx);
        if state.is_some() {
            self.read_view = state;
        }
        self.readmit(fx);
        Ok(())
    }

    fn on_registration(
        &mut self,
        from: InstanceAddress,
        upstream: InstanceAddress,
        lessee: InstanceAddress,
        fx: &mut Effects,
    ) -> Result<(), DmaError> {
        let owner = self.owner;
        if lessee.function != owner.function {
            return Err(DmaError::at(owner, format!("registration for foreign function via {from}")));
        }
        match &mut self.role {
            Role::Lessor(l) => {
                if self.state == MailboxState::Runnable || self.cfg.mutants.register_while_blocked {
                    self.accept_registration(upstream, lessee, fx)
                } else {
                    l.deferred.push_back((upstream, lessee));
                    Ok(())
                }
            }
            Role::Lessee(l) if lessee == owner && from == l.lessor => {
                self.activate_inbound(ChannelId::new(upstream, owner));
                self.transmit(upstream, Payload::LesseeRegistrationAck { lessee: owner }, fx)?;
                Ok(())
            }
            _ => Err(DmaError::at(owner, format!("stray registration from {from}"))),
        }
    }

    fn accept_registration(
        &mut self,
        upstream: InstanceAddress,
        lessee: InstanceAddress,
        fx: &mut Effects,
    ) -> Result<(), DmaError> {
        if self.add_lessee(lessee)? {
            fx.create.push(lessee);
        }
        self.transmit(lessee, Payload::LesseeRegistration { upstream, lessee }, fx)?;
        Ok(())
    }

    fn on_registration_ack(&mut self, lessee: InstanceAddress, fx: &mut Effects) -> Result<(), DmaError> {
        match self.outbound.insert(lessee, Outbound::Active) {
            Some(Outbound::Registering(buf)) => {
                self.counters.register(ChannelId::new(self.owner, lessee));
                for e in buf {
                    self.transmit(lessee, Payload::Event(e), fx)?;
                }
                Ok(())
            }
            _ => Err(DmaError::at(self.owner, format!("unsolicited registration ack from {lessee}"))),
        }
    }

    fn on_sp_ack(&mut self, from: InstanceAddress, barrier: BarrierId) -> Result<(), DmaError> {
        let owner = self.owner;
        let tolerate_late = self.cfg.mutants.unsync_before_sp_ack;
        match &mut self.role {
            Role::Source(s) => {
                if s.barrier == Some(barrier) && s.awaiting.remove(&from.function) {
                    Ok(())
                } else {
                    Err(DmaError::at(owner, format!("unexpected SP_ACK for {barrier} from {from}")))
                }
            }
            Role::Lessor(l) => {
                let owed = match &mut l.barrier {
                    Some(b) if b.id == barrier => b.awaiting_downstream.remove(&from.function),
                    _ => false,
                };
                if owed || tolerate_late {
                    Ok(())
                } else {
                    Err(DmaError::at(owner, format!("unexpected SP_ACK for {barrier} from {from}")))
                }
            }
            Role::Lessee(_) => Err(DmaError::at(owner, "SP_ACK at a lessee")),
        }
    }

    fn set_state(&mut self, to: MailboxState, barrier: Option<BarrierId>, fx: &mut Effects) {
        let from = self.state;
        self.state = to;
        fx.emit(fx.ev(self.owner, TraceKind::Transition { from, to }).maybe_barrier(barrier));
    }

    // ------------------------------------------------------------ execution

    /// The next message eligible for execution, if the mailbox is idle.
    pub fn head(&self) -> Option<&Queued> {
        if self.executing.is_some() {
            return None;
        }
        match self.state {
            MailboxState::Critical => self.criticals.front(),
            MailboxState::Runnable => self.ready.front(),
            MailboxState::Blocked => None,
        }
    }

    pub fn begin(&mut self) -> Option<Queued> {
        self.head()?;
        let q = match self.state {
            MailboxState::Critical => self.criticals.pop_front(),
            _ => self.ready.pop_front(),
        }?;
        self.executing = Some(q.clone());
        Some(q)
    }

    /// Whether the message being executed is one of this barrier's criticals.
    pub fn executing_barrier_critical(&self) -> bool {
        self.state == MailboxState::Critical
            && self.executing.as_ref().is_some_and(|q| q.msg.kind == MessageKind::Critical)
    }

    /// Keeps a critical output of a barrier critical for the downstream program.
    pub fn collect_critical(&mut self, target_fn: FunctionAddress, event: CriticalEvent) {
        if let Role::Lessor(l) = &mut self.role {
            if let Some(b) = &mut l.barrier {
                b.collected.entry(target_fn).or_default().push(event);
            }
        }
    }

    pub fn finish_execution(&mut self) {
        let q = self.executing.take();
        let Role::Lessor(l) = &mut self.role else { return };
        let Some(b) = &mut l.barrier else { return };
        let was_critical = q.is_some_and(|q| q.msg.kind == MessageKind::Critical);
        if was_critical && b.phase == BarrierPhase::Critical && self.criticals.is_empty() {
            b.criticals_done = true;
            b.held = b.collected.keys().copied().collect();
        }
    }

    // ------------------------------------------------------------- progress

    /// Advances the state machine as far as current knowledge allows.
    pub fn progress(&mut self, fx: &mut Effects) -> Result<(), DmaError> {
        match self.role {
            Role::Source(_) => self.progress_source(fx),
            Role::Lessee(_) => self.progress_lessee(fx),
            Role::Lessor(_) => self.progress_lessor(fx),
        }
    }

    fn dependency_pending(&self, payload: &BTreeMap<ChannelId, u64>) -> bool {
        let waiting = |q: &Queued| payload.get(&q.msg.channel).is_some_and(|&s| q.msg.seq_id <= s);
        payload.iter().any(|(c, &s)| {
            c.target == self.owner && self.inbound.get(c).and_then(|i| i.delivered_through).is_none_or(|d| d < s)
        }) || self.ready.iter().any(waiting)
            || self.withheld.values().any(waiting)
            || self.releasing.iter().any(waiting)
            || self.executing.as_ref().is_some_and(waiting)
    }

    fn progress_lessee(&mut self, fx: &mut Effects) -> Result<(), DmaError> {
        let Role::Lessee(l) = &self.role else { unreachable!() };
        let Some(sync) = &l.sync else { return Ok(()) };
        if sync.replied || self.executing.is_some() {
            return Ok(());
        }
        let skip = self.cfg.mutants.skip_lessee_dependency_wait;
        if !skip {
            if self.dependency_pending(&sync.payload) {
                return Ok(());
            }
            if self.outbound.values().any(|o| matches!(o, Outbound::Registering(_))) {
                return Ok(());
            }
        }
        let (barrier, lessor, blocked) = (sync.barrier, l.lessor, sync.blocked.clone());
        self.set_state(MailboxState::Blocked, Some(barrier), fx);
        self.withhold_all_ready(fx);
        let partial = self.partial.take();
        let reply = SyncReply { barrier, partial, downstream_last_sent: self.last_sent() };
        self.transmit(lessor, Payload::SyncReply(Box::new(reply)), fx)?;
        // channels from this lessee to downstream lessees end with the reply
        self.outbound.retain(|t, _| t.is_lessor());
        for (c, i) in self.inbound.iter_mut() {
            if blocked.contains(&c.source.function) && !c.source.is_lessor() {
                i.active = false;
            }
        }
        if let Role::Lessee(l) = &mut self.role {
            l.sync.as_mut().expect("syncing").replied = true;
        }
        Ok(())
    }

    fn progress_lessor(&mut self, fx: &mut Effects) -> Result<(), DmaError> {
        loop {
            let Role::Lessor(l) = &self.role else { unreachable!() };
            let Some(b) = &l.barrier else { return Ok(()) };
            match b.phase {
                BarrierPhase::Buffering => {
                    let have = b.program_functions();
                    if !b.expected.is_subset(&have) || self.executing.is_some() {
                        return Ok(());
                    }
                    if b.programs.iter().any(|p| self.dependency_pending(&p.sp.dependency_payload)) {
                        return Ok(());
                    }
                    self.enter_blocked(fx)?;
                }
                BarrierPhase::Blocked => {
                    let drop_ack = self.cfg.mutants.drop_request_ack;
                    if !b.sp_acked && (b.acks_pending.is_empty() || drop_ack) {
                        let acks: Vec<(InstanceAddress, BarrierId)> =
                            b.programs.iter().map(|p| (p.sender, p.sp.barrier)).collect();
                        for (to, id) in acks {
                            self.transmit(to, Payload::SpAck { barrier: id }, fx)?;
                        }
                        self.lessor_barrier_mut().sp_acked = true;
                        continue;
                    }
                    if b.sp_acked && b.replies.len() == b.participants.len() {
                        self.enter_critical(fx)?;
                        continue;
                    }
                    return Ok(());
                }
                BarrierPhase::Critical => {
                    if !b.criticals_done {
                        return Ok(());
                    }
                    let held = b.held.clone();
                    for f in held {
                        if self.registering_to(f) {
                            continue;
                        }
                        let b = self.lessor_barrier_mut();
                        b.held.retain(|x| *x != f);
                        let events = b.collected.remove(&f).unwrap_or_default();
                        let id = b.id;
                        let replies: Vec<BTreeMap<ChannelId, u64>> =
                            b.replies.values().map(|r| r.downstream_last_sent.clone()).collect();
                        b.awaiting_downstream.insert(f);
                        let refs: Vec<&BTreeMap<ChannelId, u64>> = replies.iter().collect();
                        if !events.is_empty() {
                            self.send_program(f, id, events, &refs, fx)?;
                        }
                    }
                    let b = self.lessor_barrier_mut();
                    let done = b.held.is_empty()
                        && (b.awaiting_downstream.is_empty() || self.cfg.mutants.unsync_before_sp_ack);
                    if !done {
                        return Ok(());
                    }
                    self.unsync(fx)?;
                }
            }
        }
    }

    fn lessor_barrier_mut(&mut self) -> &mut LessorBarrier {
        match &mut self.role {
            Role::Lessor(l) => l.barrier.as_mut().expect("active barrier"),
            _ => unreachable!(),
        }
    }

    fn enter_blocked(&mut self, fx: &mut Effects) -> Result<(), DmaError> {
        let id = self.lessor_barrier_mut().id;
        self.set_state(MailboxState::Blocked, Some(id), fx);
        self.withhold_all_ready(fx);
        let drop_ack = self.cfg.mutants.drop_request_ack;
        let owner = self.owner;
        let Role::Lessor(l) = &mut self.role else { unreachable!() };
        let participants: Vec<InstanceAddress> = l.lessees.iter().copied().collect();
        let b = l.barrier.as_mut().expect("active barrier");
        b.phase = BarrierPhase::Blocked;
        b.participants = participants.clone();
        if !drop_ack {
            b.acks_pending = participants.iter().copied().collect();
        }
        let blocked: Vec<FunctionAddress> = b.program_functions().into_iter().collect();
        let requests: Vec<(InstanceAddress, BTreeMap<ChannelId, u64>)> = participants
            .iter()
            .map(|lessee| {
                let mut slice: BTreeMap<ChannelId, u64> = BTreeMap::new();
                for p in &b.programs {
                    slice.extend(p.sp.dependency_payload.iter().filter(|(c, _)| c.target == *lessee));
                }
                (*lessee, slice)
            })
            .collect();
        for (lessee, mut slice) in requests {
            let fwd = ChannelId::new(owner, lessee);
            if let Some(s) = self.counters.last_sent(&fwd) {
                slice.insert(fwd, s);
            }
            let req = SyncRequest { barrier: id, blocked_upstreams: blocked.clone(), dependency_payload: slice };
            self.transmit(lessee, Payload::SyncRequest(req), fx)?;
        }
        Ok(())
    }

    fn enter_critical(&mut self, fx: &mut Effects) -> Result<(), DmaError> {
        let owner = self.owner;
        let cf = self.wiring.combining;
        let limit = self.cfg.list_limit;
        let at_lessee = self.cfg.mutants.criticals_at_lessee;
        let b = self.lessor_barrier_mut();
        let id = b.id;
        let mut partials = Vec::with_capacity(b.replies.len() + 1);
        let replies: Vec<PartialState> = b.replies.values().map(|r| r.partial.clone()).collect();
        let cms: Vec<SequencedMessage> = b.programs.iter().flat_map(|p| p.sp.criticals.iter().cloned()).collect();
        let first_lessee = b.participants.first().copied();
        partials.push(self.partial.clone());
        partials.extend(replies);
        let merged = consolidate(&partials, &cf, limit)?;
        let count = partials.iter().map(|p| p.update_count).sum();
        self.partial = PartialState { owner, state: merged, update_count: count };
        fx.emit(fx.ev(owner, TraceKind::Consolidate { partials: partials.len() }).barrier(id));
        self.lessor_barrier_mut().phase = BarrierPhase::Critical;
        self.set_state(MailboxState::Critical, Some(id), fx);
        match first_lessee {
            Some(lessee) if at_lessee => {
                for m in cms {
                    self.transmit(lessee, m.payload, fx)?;
                }
                let b = self.lessor_barrier_mut();
                b.criticals_done = true;
            }
            _ => {
                for m in cms {
                    fx.emit(fx.ev(owner, TraceKind::Enqueue).on(m.channel, m.seq_id).msg(m.msg_id()).barrier(id));
                    self.criticals.push_back(Queued { msg: m, arrival: 0, enqueued_at: fx.now });
                }
                if self.criticals.is_empty() {
                    self.lessor_barrier_mut().criticals_done = true;
                }
            }
        }
        Ok(())
    }

    fn unsync(&mut self, fx: &mut Effects) -> Result<(), DmaError> {
        let snapshot = self.cfg.read_heavy.then(|| read_state_snapshot(&self.partial.state));
        let upstreams = self.wiring.upstreams.clone();
        let Role::Lessor(l) = &mut self.role else { unreachable!() };
        let b = l.barrier.take().expect("active barrier");
        for p in &b.participants {
            self.transmit(*p, Payload::Unsync { barrier: b.id, state: snapshot.clone() }, fx)?;
        }
        self.set_state(MailboxState::Runnable, Some(b.id), fx);
        fx.emit(fx.ev(self.owner, TraceKind::BarrierEnd).barrier(b.id));
        let Role::Lessor(l) = &mut self.role else { unreachable!() };
        let deferred: Vec<_> = l.deferred.drain(..).collect();
        let next = l.queued.pop_front();
        for (upstream, lessee) in deferred {
            self.accept_registration(upstream, lessee, fx)?;
        }
        if let Some(p) = next {
            self.start_barrier(vec![p], &upstreams, fx)?;
        }
        self.readmit(fx);
        Ok(())
    }
}

fn control_barrier(p: &Payload) -> Option<BarrierId> {
    match p {
        Payload::SyncProgram(sp) => Some(sp.barrier),
        Payload::SyncRequest(r) => Some(r.barrier),
        Payload::SyncRequestAck { barrier } | Payload::Unsync { barrier, .. } | Payload::SpAck { barrier } => {
            Some(*barrier)
        }
        Payload::SyncReply(r) => Some(r.barrier),
        _ => None,
    }
}

/// Every control kind has a handler; used by the closure property test.
pub fn handled_control_kinds() -> &'static [ControlKind] {
    &ControlKind::ALL
}
