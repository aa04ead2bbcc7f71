//! Addresses, channels, sequenced messages and the per-channel sequencing
//! discipline shared by the rest of the runtime.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::DmaError;
use crate::protocol::{SyncProgram, SyncReply, SyncRequest};
use crate::state::ManagedState;

/// Simulated nanoseconds.
pub type SimTime = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JobId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FunctionId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkerId(pub u32);

/// One logical operator of one job.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FunctionAddress {
    pub job: JobId,
    pub function: FunctionId,
}

impl FunctionAddress {
    pub fn new(job: u32, function: u32) -> Self {
        Self { job: JobId(job), function: FunctionId(function) }
    }

    pub fn instance(self, index: u32, worker: WorkerId) -> InstanceAddress {
        InstanceAddress { function: self, index, worker }
    }
}

/// One physical instance of a function. Index 0 is the lessor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceAddress {
    pub function: FunctionAddress,
    pub index: u32,
    pub worker: WorkerId,
}

impl InstanceAddress {
    pub fn is_lessor(&self) -> bool {
        self.index == 0
    }

    pub fn job(&self) -> JobId {
        self.function.job
    }
}

impl fmt::Display for InstanceAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}@{}", self.function.job.0, self.function.function.0, self.index, self.worker.0)
    }
}

/// A directed instance-to-instance channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelId {
    pub source: InstanceAddress,
    pub target: InstanceAddress,
}

impl ChannelId {
    pub fn new(source: InstanceAddress, target: InstanceAddress) -> Self {
        Self { source, target }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.source, self.target)
    }
}

/// Globally unique identity of a logical event. Forwarding keeps the id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MsgId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ControlKind {
    SyncProgram,
    SyncRequest,
    SyncRequestAck,
    SyncReply,
    Unsync,
    LesseeRegistration,
    LesseeRegistrationAck,
    SpAck,
}

impl ControlKind {
    pub const ALL: [ControlKind; 8] = [
        ControlKind::SyncProgram,
        ControlKind::SyncRequest,
        ControlKind::SyncRequestAck,
        ControlKind::SyncReply,
        ControlKind::Unsync,
        ControlKind::LesseeRegistration,
        ControlKind::LesseeRegistrationAck,
        ControlKind::SpAck,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ControlKind::SyncProgram => "SYNC_PROGRAM",
            ControlKind::SyncRequest => "SYNC_REQUEST",
            ControlKind::SyncRequestAck => "SYNC_REQUEST_ACK",
            ControlKind::SyncReply => "SYNC_REPLY",
            ControlKind::Unsync => "UNSYNC",
            ControlKind::LesseeRegistration => "LESSEE_REGISTRATION",
            ControlKind::LesseeRegistrationAck => "LESSEE_REGISTRATION_ACK",
            ControlKind::SpAck => "SP_ACK",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Data,
    Critical,
    Control(ControlKind),
}

impl MessageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MessageKind::Data => "DATA",
            MessageKind::Critical => "CRITICAL",
            MessageKind::Control(c) => c.as_str(),
        }
    }
}

/// A user data event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: MsgId,
    pub key: u64,
    pub value: i64,
    pub event_time: u64,
    /// Injection time of the source event this one derives from.
    pub injected_at: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CriticalKind {
    /// Closes the current window; the state is emitted and reset.
    Watermark,
    /// Global snapshot marker; emits the state without resetting it.
    Snapshot,
    /// Read-only query of the consolidated state.
    Read,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalEvent {
    pub id: MsgId,
    pub kind: CriticalKind,
    pub ts: u64,
    pub injected_at: SimTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Event(Event),
    Critical(CriticalEvent),
    SyncProgram(Box<SyncProgram>),
    SyncRequest(SyncRequest),
    SyncRequestAck { barrier: BarrierId },
    SyncReply(Box<SyncReply>),
    Unsync { barrier: BarrierId, state: Option<ManagedState> },
    LesseeRegistration { upstream: InstanceAddress, lessee: InstanceAddress },
    LesseeRegistrationAck { lessee: InstanceAddress },
    SpAck { barrier: BarrierId },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Event(_) => MessageKind::Data,
            Payload::Critical(_) => MessageKind::Critical,
            Payload::SyncProgram(_) => MessageKind::Control(ControlKind::SyncProgram),
            Payload::SyncRequest(_) => MessageKind::Control(ControlKind::SyncRequest),
            Payload::SyncRequestAck { .. } => MessageKind::Control(ControlKind::SyncRequestAck),
            Payload::SyncReply(_) => MessageKind::Control(ControlKind::SyncReply),
            Payload::Unsync { .. } => MessageKind::Control(ControlKind::Unsync),
            Payload::LesseeRegistration { .. } => MessageKind::Control(ControlKind::LesseeRegistration),
            Payload::LesseeRegistrationAck { .. } => MessageKind::Control(ControlKind::LesseeRegistrationAck),
            Payload::SpAck { .. } => MessageKind::Control(ControlKind::SpAck),
        }
    }

    /// Approximate wire size used by byte-proportional transport models.
    pub fn size_bytes(&self) -> u64 {
        const HEADER: u64 = 64;
        HEADER
            + match self {
                Payload::Event(_) | Payload::Critical(_) => 32,
                Payload::SyncProgram(sp) => 24 * sp.dependency_payload.len() as u64 + 96 * sp.criticals.len() as u64,
                Payload::SyncRequest(r) => 24 * r.dependency_payload.len() as u64,
                Payload::SyncReply(r) => r.partial.state.size_bytes() + 24 * r.downstream_last_sent.len() as u64,
                Payload::Unsync { state, .. } => state.as_ref().map_or(0, |s| s.size_bytes()),
                _ => 16,
            }
    }
}

/// The unit of transport.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequencedMessage {
    pub channel: ChannelId,
    pub seq_id: u64,
    pub kind: MessageKind,
    pub payload: Payload,
    pub logical_time: Option<u64>,
}

impl SequencedMessage {
    pub fn event(&self) -> Option<&Event> {
        match &self.payload {
            Payload::Event(e) => Some(e),
            _ => None,
        }
    }

    pub fn critical(&self) -> Option<&CriticalEvent> {
        match &self.payload {
            Payload::Critical(c) => Some(c),
            _ => None,
        }
    }

    /// Id of the logical event for data and critical messages.
    pub fn msg_id(&self) -> Option<MsgId> {
        match &self.payload {
            Payload::Event(e) => Some(e.id),
            Payload::Critical(c) => Some(c.id),
            _ => None,
        }
    }

    pub fn injected_at(&self) -> Option<SimTime> {
        match &self.payload {
            Payload::Event(e) => Some(e.injected_at),
            Payload::Critical(c) => Some(c.injected_at),
            _ => None,
        }
    }
}

/// Channel-local happens-before: same channel and strictly smaller sequence id.
pub fn happens_before(a: &SequencedMessage, b: &SequencedMessage) -> bool {
    a.channel == b.channel && a.seq_id < b.seq_id
}

/// Per-channel outbound sequence counters of one sender.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqCounters {
    last: BTreeMap<ChannelId, Option<u64>>,
}

impl SeqCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, channel: ChannelId) {
        self.last.entry(channel).or_insert(None);
    }

    pub fn is_registered(&self, channel: &ChannelId) -> bool {
        self.last.contains_key(channel)
    }

    pub fn next_seq_id(&mut self, channel: ChannelId) -> Result<u64, DmaError> {
        let slot = self.last.get_mut(&channel).ok_or(DmaError::UnregisteredChannel(channel))?;
        let next = match *slot {
            None => 0,
            Some(prev) => prev.checked_add(1).expect("sequence id wraparound"),
        };
        *slot = Some(next);
        Ok(next)
    }

    /// Sequence id of the latest message sent on `channel`, if any.
    pub fn last_sent(&self, channel: &ChannelId) -> Option<u64> {
        self.last.get(channel).copied().flatten()
    }

    /// All channels with at least one send, with their latest sequence id.
    pub fn sent(&self) -> impl Iterator<Item = (ChannelId, u64)> + '_ {
        self.last.iter().filter_map(|(c, s)| s.map(|s| (*c, s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Granularity {
    SyncChannel,
    SyncOne,
}

impl Granularity {
    pub fn for_critical(kind: CriticalKind) -> Self {
        match kind {
            CriticalKind::Snapshot => Granularity::SyncOne,
            CriticalKind::Watermark | CriticalKind::Read => Granularity::SyncChannel,
        }
    }
}

/// Identity of one barrier run by one function's lessor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BarrierId {
    pub function: FunctionAddress,
    pub epoch: u64,
}

impl fmt::Display for BarrierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}#{}", self.function.job.0, self.function.function.0, self.epoch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    pub granularity: Granularity,
    pub critical_messages: Vec<SequencedMessage>,
    pub dependency_payload: BTreeMap<ChannelId, u64>,
}

impl BarrierSpec {
    /// Checks the single-sender rule of channel barriers.
    pub fn validate(&self) -> Result<(), DmaError> {
        if self.granularity == Granularity::SyncChannel {
            let mut senders = self.critical_messages.iter().map(|m| m.channel.source);
            if let Some(first) = senders.next() {
                if !first.is_lessor() || senders.any(|s| s != first) {
                    return Err(DmaError::Protocol(
                        "channel barrier criticals must come from one upstream lessor".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
