//! Protocol trace: structured events, the TSV rendering, hashing and the
//! invariant audits run over whole traces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::model::{BarrierId, ChannelId, InstanceAddress, MessageKind, MsgId, SimTime};
use crate::protocol::MailboxState;
use crate::state::Value;

pub const TRACE_HEADER: &str = "# dmactor-trace v1";
pub const TRACE_COLUMNS: &str = "sim_time\tinstance\tevent\tbarrier_id\tchannel\tseq_id\tmsg_id\tdetail";

#[derive(Clone, Debug, PartialEq)]
pub enum TraceKind {
    Send(MessageKind),
    Deliver(MessageKind),
    Enqueue,
    Withhold,
    Release,
    Forward { to: InstanceAddress },
    GetNext,
    PreApply,
    Apply { value: Option<i64> },
    PrepareSend,
    PostApply,
    Fail { reason: String },
    Transition { from: MailboxState, to: MailboxState },
    BarrierStart { programs: Vec<BarrierId> },
    Consolidate { partials: usize },
    CriticalApply { observed: Option<Value> },
    BarrierEnd,
    Create,
    Violation { reason: String },
    Feedback { target: InstanceAddress, violated: bool },
}

impl TraceKind {
    pub fn name(&self) -> &'static str {
        match self {
            TraceKind::Send(_) => "send",
            TraceKind::Deliver(_) => "deliver",
            TraceKind::Enqueue => "enqueue",
            TraceKind::Withhold => "withhold",
            TraceKind::Release => "release",
            TraceKind::Forward { .. } => "forward",
            TraceKind::GetNext => "get_next",
            TraceKind::PreApply => "pre_apply",
            TraceKind::Apply { .. } => "apply",
            TraceKind::PrepareSend => "prepare_send",
            TraceKind::PostApply => "post_apply",
            TraceKind::Fail { .. } => "fail",
            TraceKind::Transition { .. } => "transition",
            TraceKind::BarrierStart { .. } => "barrier_start",
            TraceKind::Consolidate { .. } => "consolidate",
            TraceKind::CriticalApply { .. } => "critical_apply",
            TraceKind::BarrierEnd => "barrier_end",
            TraceKind::Create => "create",
            TraceKind::Violation { .. } => "violation",
            TraceKind::Feedback { .. } => "feedback",
        }
    }

    fn detail(&self) -> String {
        match self {
            TraceKind::Send(k) | TraceKind::Deliver(k) => k.as_str().to_string(),
            TraceKind::Forward { to } => to.to_string(),
            TraceKind::Apply { value: Some(v) } => v.to_string(),
            TraceKind::Fail { reason } | TraceKind::Violation { reason } => reason.replace(['\t', '\n'], " "),
            TraceKind::Transition { from, to } => format!("{}->{}", from.as_str(), to.as_str()),
            TraceKind::BarrierStart { programs } => {
                programs.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",")
            }
            TraceKind::Consolidate { partials } => partials.to_string(),
            TraceKind::CriticalApply { observed } => match observed {
                Some(Value::Int(v)) => v.to_string(),
                Some(Value::Float(v)) => format!("{v:?}"),
                Some(Value::SumCount { sum, count }) => format!("{sum:?}/{count}"),
                None => "empty".into(),
            },
            TraceKind::Feedback { target, violated } => format!("{target}:{violated}"),
            _ => String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    pub time: SimTime,
    pub instance: InstanceAddress,
    pub kind: TraceKind,
    pub barrier: Option<BarrierId>,
    pub channel: Option<ChannelId>,
    pub seq: Option<u64>,
    pub msg: Option<MsgId>,
}

impl TraceEvent {
    pub fn new(time: SimTime, instance: InstanceAddress, kind: TraceKind) -> Self {
        Self { time, instance, kind, barrier: None, channel: None, seq: None, msg: None }
    }

    pub fn barrier(mut self, b: BarrierId) -> Self {
        self.barrier = Some(b);
        self
    }

    pub fn maybe_barrier(mut self, b: Option<BarrierId>) -> Self {
        self.barrier = b;
        self
    }

    pub fn on(mut self, channel: ChannelId, seq: u64) -> Self {
        self.channel = Some(channel);
        self.seq = Some(seq);
        self
    }

    pub fn msg(mut self, m: Option<MsgId>) -> Self {
        self.msg = m;
        self
    }

    pub fn render(&self, out: &mut String) {
        fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "-".to_string(), |x| x.to_string())
        }
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.time,
            self.instance,
            self.kind.name(),
            opt(&self.barrier),
            opt(&self.channel),
            opt(&self.seq),
            self.msg.map_or_else(|| "-".to_string(), |m| m.0.to_string()),
            self.kind.detail()
        );
    }
}

pub fn render_tsv(events: &[TraceEvent]) -> String {
    let mut out = String::with_capacity(events.len() * 64 + 64);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    out.push_str(TRACE_COLUMNS);
    out.push('\n');
    for e in events {
        e.render(&mut out);
    }
    out
}

/// Hex SHA-256 of the TSV rendering.
pub fn trace_hash(events: &[TraceEvent]) -> String {
    let mut h = Sha256::new();
    let mut line = String::new();
    for e in events {
        line.clear();
        e.render(&mut line);
        h.update(line.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Receivers observe strictly increasing sequence ids on every channel.
pub fn audit_fifo(events: &[TraceEvent]) -> Result<(), String> {
    let mut last: BTreeMap<ChannelId, u64> = BTreeMap::new();
    for e in events {
        if let (TraceKind::Deliver(_), Some(c), Some(s)) = (&e.kind, e.channel, e.seq) {
            if let Some(prev) = last.insert(c, s) {
                if s <= prev {
                    return Err(format!("channel {c}: seq {s} delivered after {prev}"));
                }
            }
        }
    }
    Ok(())
}

/// enqueue ≤ get_next < pre_apply < apply < prepare_send* < post_apply for every executed message.
pub fn audit_hook_order(events: &[TraceEvent]) -> Result<(), String> {
    #[derive(Clone, Copy, PartialEq, Debug)]
    enum Stage {
        Enqueued,
        Picked,
        Pre,
        Applied,
        Post,
    }
    let mut stage: BTreeMap<(MsgId, InstanceAddress), Stage> = BTreeMap::new();
    for e in events {
        let Some(m) = e.msg else { continue };
        let key = (m, e.instance);
        let cur = stage.get(&key).copied();
        let next = match (&e.kind, cur) {
            (TraceKind::Enqueue, _) => Stage::Enqueued,
            (TraceKind::GetNext, Some(Stage::Enqueued)) => Stage::Picked,
            (TraceKind::PreApply, Some(Stage::Picked)) => Stage::Pre,
            (TraceKind::Apply { .. } | TraceKind::Fail { .. }, Some(Stage::Pre)) => Stage::Applied,
            (TraceKind::PrepareSend, Some(Stage::Applied)) => Stage::Applied,
            (TraceKind::PostApply, Some(Stage::Applied)) => Stage::Post,
            (TraceKind::GetNext | TraceKind::PreApply | TraceKind::PrepareSend | TraceKind::PostApply, _) => {
                return Err(format!("msg {} at {}: {} out of order after {:?}", m.0, e.instance, e.kind.name(), cur));
            }
            (TraceKind::Apply { .. } | TraceKind::Fail { .. }, _) if cur.is_some() => {
                return Err(format!("msg {} at {}: apply out of order after {:?}", m.0, e.instance, cur));
            }
            _ => continue,
        };
        stage.insert(key, next);
    }
    Ok(())
}

/// Every data message created is executed (or failed) at most once, and
/// exactly once unless `allow_unfinished`.
pub fn audit_exactly_once(events: &[TraceEvent], allow_unfinished: bool) -> Result<(), String> {
    let mut created: BTreeSet<MsgId> = BTreeSet::new();
    let mut done: BTreeMap<MsgId, usize> = BTreeMap::new();
    for e in events {
        match (&e.kind, e.msg) {
            (TraceKind::Send(MessageKind::Data), Some(m)) => {
                created.insert(m);
            }
            (TraceKind::Apply { .. } | TraceKind::Fail { .. }, Some(m)) if created.contains(&m) => {
                *done.entry(m).or_default() += 1;
            }
            _ => {}
        }
    }
    if let Some((m, n)) = done.iter().find(|(_, n)| **n > 1) {
        return Err(format!("msg {} executed {n} times", m.0));
    }
    if !allow_unfinished {
        if let Some(m) = created.iter().find(|m| !done.contains_key(m)) {
            return Err(format!("msg {} never executed", m.0));
        }
    }
    Ok(())
}

/// Only RUNNABLE→BLOCKED, BLOCKED→CRITICAL (lessor), BLOCKED→RUNNABLE (lessee)
/// and CRITICAL→RUNNABLE, chained per instance.
pub fn audit_transitions(events: &[TraceEvent]) -> Result<(), String> {
    use MailboxState::*;
    let mut cur: BTreeMap<InstanceAddress, MailboxState> = BTreeMap::new();
    for e in events {
        if let TraceKind::Transition { from, to } = e.kind {
            let before = cur.get(&e.instance).copied().unwrap_or(Runnable);
            if before != from {
                return Err(format!("{}: transition from {} while {}", e.instance, from.as_str(), before.as_str()));
            }
            let legal = matches!(
                (from, to, e.instance.is_lessor()),
                (Runnable, Blocked, _)
                    | (Blocked, Critical, true)
                    | (Blocked, Runnable, false)
                    | (Critical, Runnable, true)
            );
            if !legal {
                return Err(format!("{}: illegal transition {}->{}", e.instance, from.as_str(), to.as_str()));
            }
            cur.insert(e.instance, to);
        }
    }
    Ok(())
}

pub fn audit_all(events: &[TraceEvent], allow_unfinished: bool) -> Result<(), String> {
    audit_fifo(events)?;
    audit_hook_order(events)?;
    audit_exactly_once(events, allow_unfinished)?;
    audit_transitions(events)?;
    if let Some(v) = events.iter().find(|e| matches!(e.kind, TraceKind::Violation { .. })) {
        return Err(format!("protocol violation at {}: {}", v.instance, v.kind.detail()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FunctionAddress, WorkerId};

    fn inst(f: u32, i: u32) -> InstanceAddress {
        FunctionAddress::new(0, f).instance(i, WorkerId(0))
    }

    fn ev(kind: TraceKind, at: InstanceAddress, msg: u64) -> TraceEvent {
        TraceEvent::new(0, at, kind).msg(Some(MsgId(msg)))
    }

    #[test]
    fn fifo_audit_flags_reordering() {
        let c = ChannelId::new(inst(0, 0), inst(1, 0));
        let d = |s| TraceEvent::new(0, inst(1, 0), TraceKind::Deliver(MessageKind::Data)).on(c, s);
        assert!(audit_fifo(&[d(0), d(1), d(3)]).is_ok());
        assert!(audit_fifo(&[d(0), d(2), d(1)]).is_err());
    }

    #[test]
    fn hook_order_audit() {
        let a = inst(1, 0);
        let good = vec![
            ev(TraceKind::Enqueue, a, 1),
            ev(TraceKind::GetNext, a, 1),
            ev(TraceKind::PreApply, a, 1),
            ev(TraceKind::Apply { value: None }, a, 1),
            ev(TraceKind::PrepareSend, a, 1),
            ev(TraceKind::PrepareSend, a, 1),
            ev(TraceKind::PostApply, a, 1),
        ];
        assert!(audit_hook_order(&good).is_ok());
        let mut bad = good.clone();
        bad.swap(2, 3);
        assert!(audit_hook_order(&bad).is_err());
    }

    #[test]
    fn exactly_once_audit() {
        let a = inst(1, 0);
        let send = TraceEvent::new(0, inst(0, 0), TraceKind::Send(MessageKind::Data)).msg(Some(MsgId(5)));
        let apply = ev(TraceKind::Apply { value: None }, a, 5);
        assert!(audit_exactly_once(&[send.clone(), apply.clone()], false).is_ok());
        assert!(audit_exactly_once(&[send.clone(), apply.clone(), apply], false).is_err());
        assert!(audit_exactly_once(std::slice::from_ref(&send), false).is_err());
        assert!(audit_exactly_once(&[send], true).is_ok());
    }

    #[test]
    fn transition_audit() {
        use MailboxState::*;
        let t = |i, from, to| TraceEvent::new(0, inst(1, i), TraceKind::Transition { from, to });
        assert!(
            audit_transitions(&[t(0, Runnable, Blocked), t(0, Blocked, Critical), t(0, Critical, Runnable)]).is_ok()
        );
        assert!(audit_transitions(&[t(1, Runnable, Blocked), t(1, Blocked, Runnable)]).is_ok());
        assert!(audit_transitions(&[t(1, Runnable, Blocked), t(1, Blocked, Critical)]).is_err());
        assert!(audit_transitions(&[t(0, Blocked, Critical)]).is_err());
    }

    #[test]
    fn rendering_is_stable() {
        let c = ChannelId::new(inst(0, 0), inst(1, 0));
        let e = TraceEvent::new(7, inst(1, 0), TraceKind::Deliver(MessageKind::Data)).on(c, 3).msg(Some(MsgId(9)));
        let tsv = render_tsv(std::slice::from_ref(&e));
        assert_eq!(tsv.lines().next(), Some(TRACE_HEADER));
        assert_eq!(tsv.lines().nth(2), Some("7\t0/1/0@0\tdeliver\t-\t0/0/0@0->0/1/0@0\t3\t9\tDATA"));
        assert_eq!(trace_hash(std::slice::from_ref(&e)), trace_hash(&[e]));
    }
}
