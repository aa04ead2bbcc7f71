//! Exhaustive barrier-safety checking on small topologies.
//!
//! A topology is N upstream functions `U^i` (each fed by a source and
//! pre-scaled to `P^i` instances) feeding one downstream windowed function
//! `D` with `Q` instances. Every delivery order that respects per-channel
//! FIFO is replayed; two orders that hand every instance the same inbound
//! sequence are the same interleaving. The final trace of each is judged by
//! an oracle that only reads the trace.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{
    ChannelId, ControlKind, CriticalKind, FunctionAddress, Granularity, InstanceAddress, JobId, MessageKind,
    SequencedMessage, WorkerId,
};
use crate::operators::{Operator, OperatorKind};
use crate::protocol::{Mutant, ProtocolConfig, Queued};
use crate::runtime::{DataflowJob, FunctionSpec, Runtime, SourceSpec};
use crate::scheduling::{Ctx, Decision, Head, SchedulingStrategy};
use crate::state::Value;
use crate::trace::{audit_all, render_tsv, TraceEvent, TraceKind};

pub const DEFAULT_CAP: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamSpec {
    /// Instances including the lessor.
    pub instances: u32,
    /// Data sent by the source before the critical.
    pub before: u32,
    pub after: u32,
    #[serde(default = "yes")]
    pub critical: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    #[serde(default)]
    pub name: String,
    pub upstreams: Vec<UpstreamSpec>,
    /// Downstream instances including the lessor.
    pub downstream: u32,
    /// watermark and read block one channel; snapshot blocks all upstreams.
    #[serde(default = "default_critical")]
    pub critical: String,
    /// Downstream index every post-critical output goes to; may name a
    /// not-yet-leased instance.
    pub after_target: Option<u32>,
    #[serde(default)]
    pub mutants: Vec<String>,
    pub cap: Option<u64>,
    /// Sources spread their data over the upstream instances themselves
    /// instead of through the upstream lessor.
    #[serde(default)]
    pub source_direct: bool,
}

fn default_critical() -> String {
    "watermark".into()
}

impl TopologySpec {
    pub fn critical_kind(&self) -> Result<CriticalKind, String> {
        match self.critical.as_str() {
            "watermark" => Ok(CriticalKind::Watermark),
            "snapshot" => Ok(CriticalKind::Snapshot),
            "read" => Ok(CriticalKind::Read),
            k => Err(format!("critical: unknown kind {k:?}")),
        }
    }

    pub fn granularity(&self) -> Result<Granularity, String> {
        self.critical_kind().map(Granularity::for_critical)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.critical_kind()?;
        if self.upstreams.is_empty() || self.upstreams.len() > 2 {
            return Err("upstreams: between 1 and 2 upstream functions".into());
        }
        if !(1..=3).contains(&self.downstream) {
            return Err("downstream: between 1 and 3 instances".into());
        }
        for (i, u) in self.upstreams.iter().enumerate() {
            if !(1..=3).contains(&u.instances) {
                return Err(format!("upstreams[{i}].instances: between 1 and 3"));
            }
            if u.before > 4 || u.after > 4 {
                return Err(format!("upstreams[{i}]: at most 4 data messages on each side of the critical"));
            }
        }
        if let Some(t) = self.after_target {
            if t > self.downstream {
                return Err(format!("after_target: {t} skips past the next new instance {}", self.downstream));
            }
        }
        for (i, m) in self.mutants.iter().enumerate() {
            Mutant::parse(m).ok_or_else(|| format!("mutants[{i}]: unknown mutant {m:?}"))?;
        }
        Ok(())
    }

    fn protocol(&self) -> ProtocolConfig {
        let mut cfg = ProtocolConfig::default();
        for m in &self.mutants {
            Mutant::parse(m).expect("validated").enable(&mut cfg.mutants);
        }
        cfg
    }

    pub fn data_messages(&self) -> u32 {
        self.upstreams.iter().map(|u| u.before + u.after).sum()
    }
}

pub fn load_topology(path: &Path) -> Result<TopologySpec, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut t: TopologySpec = toml::from_str(&text).map_err(|e| format!("{}: {}", path.display(), e.message()))?;
    if t.name.is_empty() {
        t.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    }
    t.validate().map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(t)
}

/// Topology files in `dir`, sorted by name.
pub fn load_corpus(dir: &Path) -> Result<Vec<TopologySpec>, String> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_topology(p)).collect()
}

// ------------------------------------------------------------ scripted routing

/// Deterministic routing for checker runs: upstream lessors spread their
/// j-th input over instance `j % P`; upstream instance `k` sends its n-th
/// output to `(k + n) % Q`, or to the configured index once past its
/// pre-critical share.
#[derive(Clone)]
struct Scripted {
    /// Per upstream function: instance count.
    spread: BTreeMap<FunctionAddress, u32>,
    /// Per upstream instance: how many outputs precede the critical.
    before: BTreeMap<(FunctionAddress, u32), u32>,
    downstream: u32,
    after_target: Option<u32>,
    /// Per source function, when sources address upstream instances directly.
    direct: BTreeMap<FunctionAddress, u32>,
    received: BTreeMap<InstanceAddress, u32>,
    sent: BTreeMap<InstanceAddress, u32>,
}

impl SchedulingStrategy for Scripted {
    fn name(&self) -> &'static str {
        "scripted"
    }

    fn enqueue(&mut self, _: &Ctx, at: InstanceAddress, q: &Queued) -> Decision {
        match self.spread.get(&at.function) {
            Some(&p) if at.is_lessor() && q.msg.kind == MessageKind::Data && self.direct.is_empty() => {
                let j = self.received.entry(at).or_default();
                let i = *j % p;
                *j += 1;
                Decision::Forward(i)
            }
            _ => Decision::AcceptLocal,
        }
    }

    fn get_next_message(&mut self, _: &Ctx, heads: &[Head]) -> Option<usize> {
        (0..heads.len()).min_by_key(|&i| heads[i].msg.arrival)
    }

    fn pre_apply(&mut self, _: &Ctx, _: InstanceAddress, _: &Queued) {}
    fn post_apply(&mut self, _: &Ctx, _: InstanceAddress, _: &Queued) {}

    fn prepare_send(&mut self, _: &Ctx, from: InstanceAddress, _: InstanceAddress, _: bool) -> u32 {
        if let Some(&p) = self.direct.get(&from.function) {
            let n = self.sent.entry(from).or_default();
            *n += 1;
            return (*n - 1) % p;
        }
        if !self.spread.contains_key(&from.function) {
            return 0;
        }
        let n = self.sent.entry(from).or_default();
        let k = *n;
        *n += 1;
        let before = self.before.get(&(from.function, from.index)).copied().unwrap_or(0);
        match self.after_target {
            Some(t) if k >= before => t,
            _ => (from.index + k) % self.downstream,
        }
    }

    fn violation_feedback(&mut self, _: &Ctx, _: InstanceAddress, _: bool) {}

    fn clone_box(&self) -> Box<dyn SchedulingStrategy> {
        Box::new(self.clone())
    }
}

// ------------------------------------------------------------ world

const JOB: u32 = 0;
const D_ID: u32 = 0;

fn upstream_fn(i: usize) -> FunctionAddress {
    FunctionAddress::new(JOB, 1 + i as u32)
}
fn source_fn(i: usize) -> FunctionAddress {
    FunctionAddress::new(JOB, 10 + i as u32)
}
fn downstream_fn() -> FunctionAddress {
    FunctionAddress::new(JOB, D_ID)
}

/// A replayable system state for the enumerator.
pub trait Explorable: Clone + Send {
    /// Deliverable choices (channel heads).
    fn choices(&self) -> Vec<ChannelId>;
    fn step(&mut self, c: ChannelId) -> Result<(), Failure>;
    /// Identifies the state up to delivery orders that are equivalent.
    fn key(&self) -> u64;
    /// Judges a state with nothing left to deliver.
    fn finish(&self) -> Result<(), Failure>;
    fn path(&self) -> &[(ChannelId, u64)];
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub reason: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub verdicts: Vec<BarrierVerdict>,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

impl Failure {
    fn new(reason: impl Into<String>) -> Self {
        Self { reason: reason.into(), verdicts: Vec::new(), trace: Vec::new() }
    }
}

#[derive(Clone)]
pub struct World {
    rt: Runtime,
    inflight: BTreeMap<ChannelId, VecDeque<SequencedMessage>>,
    history: BTreeMap<InstanceAddress, (u64, u32)>,
    path: Vec<(ChannelId, u64)>,
    upstreams: Vec<FunctionAddress>,
    expected_criticals: usize,
    granularity: Granularity,
    closes_window: bool,
    source_direct: bool,
    /// Per upstream: bit masks of the values injected before and after its critical.
    injected: Vec<(i64, i64)>,
}

impl World {
    pub fn new(t: &TopologySpec) -> Result<Self, String> {
        t.validate()?;
        let kind = t.critical_kind()?;
        let n = t.upstreams.len();
        // sources first, then each function's instances on consecutive workers
        let mut next = n as u32;
        let mut functions = vec![FunctionSpec {
            id: D_ID,
            name: "D".into(),
            operator: Operator::new(OperatorKind::WindowSum),
            worker: WorkerId(0),
        }];
        let mut sources = Vec::new();
        let mut edges = Vec::new();
        for (i, u) in t.upstreams.iter().enumerate() {
            let f = upstream_fn(i);
            functions.push(FunctionSpec {
                id: f.function.0,
                name: format!("U{i}"),
                operator: Operator::new(OperatorKind::Map),
                worker: WorkerId(next),
            });
            next += u.instances;
            edges.push((f.function.0, D_ID));
            sources.push(SourceSpec {
                id: source_fn(i).function.0,
                name: format!("S{i}"),
                worker: WorkerId(i as u32),
                targets: vec![f.function.0],
                route_by_key: false,
            });
        }
        functions[0].worker = WorkerId(next);
        // one spare worker for a registration of index Q
        let workers = next + t.downstream + 1;
        let job = DataflowJob { id: JobId(JOB), functions, edges, sources };

        let mut spread = BTreeMap::new();
        let mut before = BTreeMap::new();
        let mut direct = BTreeMap::new();
        for (i, u) in t.upstreams.iter().enumerate() {
            let f = upstream_fn(i);
            spread.insert(f, u.instances);
            if t.source_direct {
                direct.insert(source_fn(i), u.instances);
            }
            for k in 0..u.instances {
                let share = (0..u.before).filter(|j| j % u.instances == k).count() as u32;
                before.insert((f, k), share);
            }
        }
        let script = Scripted {
            spread,
            before,
            downstream: t.downstream,
            after_target: t.after_target,
            direct,
            received: BTreeMap::new(),
            sent: BTreeMap::new(),
        };
        let strategies = (0..workers).map(|_| Box::new(script.clone()) as Box<dyn SchedulingStrategy>).collect();
        let mut rt = Runtime::new(strategies, t.protocol());
        rt.register_job(&job).map_err(|e| e.to_string())?;

        let d = downstream_fn();
        let d_instances: Vec<InstanceAddress> = (0..t.downstream)
            .map(|k| if k == 0 { Ok(rt.lessor(d).expect("registered")) } else { rt.lease(d, k) })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let mut upstreams = Vec::new();
        for (i, u) in t.upstreams.iter().enumerate() {
            let f = upstream_fn(i);
            upstreams.push(f);
            let lessor = rt.lessor(f).expect("registered");
            let mut mine = vec![lessor];
            for k in 1..u.instances {
                let at = rt.lease(f, k).map_err(|e| e.to_string())?;
                rt.activate_channel(lessor, at).map_err(|e| e.to_string())?;
                mine.push(at);
            }
            for &from in &mine {
                for &to in d_instances.iter().skip(1) {
                    rt.activate_channel(from, to).map_err(|e| e.to_string())?;
                }
            }
        }

        // preload: data, the critical, data; each value a distinct bit
        let mut bit = 0;
        let mut injected = Vec::new();
        for (i, u) in t.upstreams.iter().enumerate() {
            let s = source_fn(i);
            let mut masks = (0, 0);
            for _ in 0..u.before {
                rt.inject_data(s, bit, 1 << bit, 0).map_err(|e| e.to_string())?;
                masks.0 |= 1 << bit;
                bit += 1;
            }
            if u.critical {
                rt.inject_critical(s, kind, 0).map_err(|e| e.to_string())?;
            }
            for _ in 0..u.after {
                rt.inject_data(s, bit, 1 << bit, 0).map_err(|e| e.to_string())?;
                masks.1 |= 1 << bit;
                bit += 1;
            }
            injected.push(if u.critical { masks } else { (0, 0) });
        }
        let critical_upstreams = t.upstreams.iter().filter(|u| u.critical).count();
        let mut w = World {
            rt,
            inflight: BTreeMap::new(),
            history: BTreeMap::new(),
            path: Vec::new(),
            upstreams,
            expected_criticals: critical_upstreams,
            granularity: Granularity::for_critical(kind),
            closes_window: kind == CriticalKind::Watermark,
            source_direct: t.source_direct,
            injected,
        };
        w.collect();
        Ok(w)
    }

    fn collect(&mut self) {
        for m in self.rt.take_outbox() {
            self.inflight.entry(m.channel).or_default().push_back(m);
        }
    }

    /// Runs every worker until nothing is runnable.
    fn run_local(&mut self, now: u64) -> Result<(), Failure> {
        loop {
            let mut progressed = false;
            for w in 0..self.rt.worker_count() {
                if self.rt.begin(WorkerId(w), now).is_some() {
                    self.rt.complete(WorkerId(w), now).map_err(|e| Failure::new(e.to_string()))?;
                    progressed = true;
                }
            }
            if !progressed {
                return Ok(());
            }
        }
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.rt.trace
    }

    /// Ground truth at the upstream stage: source data injected before the
    /// critical is executed before it, data injected after is not.
    fn injection_order_check(&self, trace: &[TraceEvent]) -> Result<(), Failure> {
        let hb = Causality::new(trace);
        for (&u, &(before, after)) in self.upstreams.iter().zip(&self.injected) {
            if before | after == 0 {
                continue;
            }
            let Some(cu) = trace
                .iter()
                .position(|e| e.instance.function == u && matches!(e.kind, TraceKind::CriticalApply { .. }))
            else {
                continue;
            };
            let mut seen = 0;
            for (i, e) in trace.iter().enumerate() {
                let TraceKind::Apply { value: Some(v) } = e.kind else { continue };
                if e.instance.function != u {
                    continue;
                }
                seen |= v;
                let at = format!("value {v} at {}", e.instance);
                if v & before != 0 && !hb.precedes(trace, i, cu) {
                    return Err(Failure::new(format!("{at}: injected before the critical, executed after it")));
                }
                if v & after != 0 && hb.precedes(trace, i, cu) {
                    return Err(Failure::new(format!("{at}: injected after the critical, executed before it")));
                }
            }
            if seen & before != before {
                return Err(Failure::new(format!("{u:?}: pre-critical input never executed")));
            }
        }
        Ok(())
    }
}

impl Explorable for World {
    fn choices(&self) -> Vec<ChannelId> {
        self.inflight.iter().filter(|(_, q)| !q.is_empty()).map(|(c, _)| *c).collect()
    }

    fn step(&mut self, c: ChannelId) -> Result<(), Failure> {
        let q = self.inflight.get_mut(&c).expect("chosen channel");
        let m = q.pop_front().expect("non-empty");
        if q.is_empty() {
            self.inflight.remove(&c);
        }
        let (h, n) = self.history.entry(c.target).or_insert((0, 0));
        let mut hs = DefaultHasher::new();
        (*h, c, m.seq_id).hash(&mut hs);
        *h = hs.finish();
        *n += 1;
        self.path.push((c, m.seq_id));
        let now = self.path.len() as u64;
        self.rt.deliver(m, now).map_err(|e| Failure::new(e.to_string()))?;
        self.run_local(now)?;
        self.collect();
        if let Some(v) = self.rt.violations.first() {
            return Err(Failure::new(format!("protocol violation: {v}")));
        }
        Ok(())
    }

    fn key(&self) -> u64 {
        let mut hs = DefaultHasher::new();
        self.history.hash(&mut hs);
        hs.finish()
    }

    fn finish(&self) -> Result<(), Failure> {
        let trace = &self.rt.trace;
        if !self.rt.is_quiescent() {
            return Err(Failure::new(format!("no progress: {}", self.rt.stuck_report().join("; "))));
        }
        audit_all(trace, false).map_err(Failure::new)?;
        let d = downstream_fn();
        let mut at_d = 0;
        let mut at_u: BTreeMap<FunctionAddress, usize> = BTreeMap::new();
        for e in trace {
            if let TraceKind::CriticalApply { .. } = e.kind {
                if !e.instance.is_lessor() {
                    return Err(Failure::new(format!("critical executed at lessee {}", e.instance)));
                }
                if e.instance.function == d {
                    at_d += 1;
                } else {
                    *at_u.entry(e.instance.function).or_default() += 1;
                }
            }
        }
        if at_d != self.expected_criticals || at_u.values().sum::<usize>() != self.expected_criticals {
            return Err(Failure::new(format!(
                "expected {} criticals at each stage, downstream executed {at_d}, upstream {}",
                self.expected_criticals,
                at_u.values().sum::<usize>()
            )));
        }
        self.injection_order_check(trace)?;
        let mut verdicts = judge(trace, d, &self.upstreams, self.granularity, Some(self.closes_window))?;
        if self.source_direct {
            // the upstream stage is itself a barrier over its source
            for (i, &u) in self.upstreams.iter().enumerate() {
                verdicts.extend(judge(trace, u, &[source_fn(i)], self.granularity, None)?);
            }
        }
        if verdicts.iter().any(|v| !v.violations.is_empty()) {
            let first = verdicts.iter().flat_map(|v| &v.violations).next().expect("some");
            return Err(Failure { reason: format!("{}: {}", first.0, first.1), verdicts, trace: Vec::new() });
        }
        Ok(())
    }

    fn path(&self) -> &[(ChannelId, u64)] {
        &self.path
    }
}

// ------------------------------------------------------------ oracle

/// A message by its channel and sequence id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MsgRef {
    pub channel: ChannelId,
    pub seq: u64,
}

impl std::fmt::Display for MsgRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.channel, self.seq)
    }
}

impl Serialize for MsgRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BarrierVerdict {
    /// The critical messages of the barrier.
    pub barrier_id: Vec<MsgRef>,
    pub dependency_set: Vec<MsgRef>,
    pub pending_set: Vec<MsgRef>,
    pub violations: Vec<(String, String)>,
}

/// One critical message sent to the downstream function, with the
/// upstream barrier it closed.
#[derive(Clone, Debug)]
struct Marker {
    cm: MsgRef,
    upstream: FunctionAddress,
    barrier: Option<crate::model::BarrierId>,
}

fn markers(trace: &[TraceEvent], d: FunctionAddress) -> Vec<Marker> {
    trace
        .iter()
        .filter(|e| e.kind == TraceKind::Send(MessageKind::Critical))
        .filter_map(|e| {
            let (c, seq) = (e.channel?, e.seq?);
            (c.target.function == d).then_some(Marker {
                cm: MsgRef { channel: c, seq },
                upstream: c.source.function,
                barrier: e.barrier,
            })
        })
        .collect()
}

/// Splits each upstream instance's data sends to `d` at its marker: the
/// critical's own send for the lessor, the instance's SYNC_REPLY for a lessee.
fn split_sends(trace: &[TraceEvent], d: FunctionAddress, m: &Marker) -> (BTreeSet<MsgRef>, BTreeSet<MsgRef>) {
    let mut dep = BTreeSet::new();
    let mut pend = BTreeSet::new();
    let mut passed: BTreeSet<InstanceAddress> = BTreeSet::new();
    let mut replied: BTreeSet<InstanceAddress> = BTreeSet::new();
    // lessees that never reply for the barrier fall in neither set
    for e in trace.iter().filter(|e| e.instance.function == m.upstream) {
        if e.kind == TraceKind::Send(MessageKind::Control(ControlKind::SyncReply))
            && e.barrier == m.barrier
            && m.barrier.is_some()
        {
            replied.insert(e.instance);
        }
    }
    for e in trace.iter().filter(|e| e.instance.function == m.upstream) {
        let Some(c) = e.channel else { continue };
        match &e.kind {
            TraceKind::Send(MessageKind::Critical) if c == m.cm.channel && e.seq == Some(m.cm.seq) => {
                passed.insert(e.instance);
            }
            TraceKind::Send(MessageKind::Control(ControlKind::SyncReply))
                if e.barrier == m.barrier && m.barrier.is_some() =>
            {
                passed.insert(e.instance);
            }
            TraceKind::Send(MessageKind::Data) if c.target.function == d => {
                let r = MsgRef { channel: c, seq: e.seq.unwrap_or(0) };
                if !e.instance.is_lessor() && !replied.contains(&e.instance) {
                    continue;
                }
                if passed.contains(&e.instance) {
                    pend.insert(r);
                } else {
                    dep.insert(r);
                }
            }
            _ => {}
        }
    }
    (dep, pend)
}

/// The dependency set of the barrier made of `cms`: upstream lessor sends
/// before the critical plus upstream lessee sends before their SYNC_REPLY.
pub fn compute_dependency_set(trace: &[TraceEvent], d: FunctionAddress, cms: &[MsgRef]) -> BTreeSet<MsgRef> {
    markers(trace, d).iter().filter(|m| cms.contains(&m.cm)).flat_map(|m| split_sends(trace, d, m).0).collect()
}

/// The pending set: sends after the critical (lessor) or after SYNC_REPLY (lessee).
pub fn compute_pending_set(trace: &[TraceEvent], d: FunctionAddress, cms: &[MsgRef]) -> BTreeSet<MsgRef> {
    markers(trace, d).iter().filter(|m| cms.contains(&m.cm)).flat_map(|m| split_sends(trace, d, m).1).collect()
}

/// Vector clocks over instances, from matched send and deliver events.
struct Causality {
    procs: BTreeMap<InstanceAddress, usize>,
    clocks: Vec<Vec<u32>>,
}

impl Causality {
    fn new(trace: &[TraceEvent]) -> Self {
        let mut procs = BTreeMap::new();
        for e in trace {
            let n = procs.len();
            procs.entry(e.instance).or_insert(n);
        }
        let width = procs.len();
        let mut cur = vec![vec![0u32; width]; width];
        let mut sent: BTreeMap<(ChannelId, u64), Vec<u32>> = BTreeMap::new();
        let mut clocks = Vec::with_capacity(trace.len());
        for e in trace {
            let p = procs[&e.instance];
            match (&e.kind, e.channel, e.seq) {
                (TraceKind::Deliver(_), Some(c), Some(s)) => {
                    if let Some(v) = sent.get(&(c, s)) {
                        for (a, b) in cur[p].iter_mut().zip(v) {
                            *a = (*a).max(*b);
                        }
                    }
                    cur[p][p] += 1;
                }
                (TraceKind::Send(_), Some(c), Some(s)) => {
                    cur[p][p] += 1;
                    sent.insert((c, s), cur[p].clone());
                }
                _ => cur[p][p] += 1,
            }
            clocks.push(cur[p].clone());
        }
        Self { procs, clocks }
    }

    /// Event `a` happens before (or is) event `b`.
    fn precedes(&self, trace: &[TraceEvent], a: usize, b: usize) -> bool {
        let p = self.procs[&trace[a].instance];
        self.clocks[b][p] >= self.clocks[a][p]
    }
}

fn judge(
    trace: &[TraceEvent],
    d: FunctionAddress,
    upstreams: &[FunctionAddress],
    g: Granularity,
    closes_window: Option<bool>,
) -> Result<Vec<BarrierVerdict>, Failure> {
    let marks = markers(trace, d);
    let groups: Vec<Vec<&Marker>> = match g {
        Granularity::SyncChannel => marks.iter().map(|m| vec![m]).collect(),
        Granularity::SyncOne if marks.is_empty() => Vec::new(),
        Granularity::SyncOne => {
            let from: BTreeSet<_> = marks.iter().map(|m| m.upstream).collect();
            if from.len() != upstreams.len() && marks.len() == upstreams.len() {
                return Err(Failure::new("global barrier missing an upstream critical"));
            }
            vec![marks.iter().collect()]
        }
    };
    let hb = Causality::new(trace);
    let mut exec: BTreeMap<MsgRef, (usize, i64)> = BTreeMap::new();
    let mut crit: BTreeMap<MsgRef, (usize, Option<Value>)> = BTreeMap::new();
    let mut d_crit_order = Vec::new();
    for (i, e) in trace.iter().enumerate() {
        if e.instance.function != d {
            continue;
        }
        let (Some(c), Some(s)) = (e.channel, e.seq) else { continue };
        let r = MsgRef { channel: c, seq: s };
        match &e.kind {
            TraceKind::Apply { value: Some(v) } => {
                exec.insert(r, (i, *v));
            }
            TraceKind::CriticalApply { observed } => {
                crit.insert(r, (i, observed.clone()));
                d_crit_order.push(r);
            }
            _ => {}
        }
    }
    let mut verdicts = Vec::new();
    for group in groups {
        let cms: Vec<MsgRef> = group.iter().map(|m| m.cm).collect();
        let mut dep = BTreeSet::new();
        let mut pend = BTreeSet::new();
        for m in &group {
            let (a, b) = split_sends(trace, d, m);
            dep.extend(a);
            pend.extend(b);
        }
        let mut violations = Vec::new();
        let cm_events: Vec<usize> = cms.iter().filter_map(|c| crit.get(c).map(|x| x.0)).collect();
        if cm_events.len() != cms.len() {
            violations.push((cms[0].to_string(), "critical never executed".to_string()));
        }
        for m in &dep {
            match exec.get(m) {
                None => violations.push((m.to_string(), "dependency never executed".into())),
                Some(&(i, _)) => {
                    if cm_events.iter().any(|&c| !hb.precedes(trace, i, c)) {
                        violations.push((m.to_string(), "dependency executed after the critical".into()));
                    }
                }
            }
        }
        for m in &pend {
            if let Some(&(i, _)) = exec.get(m) {
                if cm_events.iter().any(|&c| hb.precedes(trace, i, c)) {
                    violations.push((m.to_string(), "pending message executed before the critical".into()));
                }
            }
        }
        verdicts.push(BarrierVerdict {
            barrier_id: cms,
            dependency_set: dep.into_iter().collect(),
            pending_set: pend.into_iter().collect(),
            violations,
        });
    }
    // stateless stages observe nothing
    if let Some(closes) = closes_window {
        consolidation_check(trace, &hb, &exec, &crit, &d_crit_order, closes, &mut verdicts);
    }
    Ok(verdicts)
}

/// Each critical observes the sum of exactly the data that causally precedes
/// it and no earlier window-closing critical.
fn consolidation_check(
    trace: &[TraceEvent],
    hb: &Causality,
    exec: &BTreeMap<MsgRef, (usize, i64)>,
    crit: &BTreeMap<MsgRef, (usize, Option<Value>)>,
    order: &[MsgRef],
    closes_window: bool,
    verdicts: &mut [BarrierVerdict],
) {
    let mut closed: Vec<usize> = Vec::new();
    for r in order {
        let (ci, observed) = &crit[r];
        let expected: i64 = exec
            .values()
            .filter(|(i, _)| hb.precedes(trace, *i, *ci) && !closed.iter().any(|&c| hb.precedes(trace, *i, c)))
            .map(|(_, v)| *v)
            .sum();
        let any = exec
            .values()
            .any(|(i, _)| hb.precedes(trace, *i, *ci) && !closed.iter().any(|&c| hb.precedes(trace, *i, c)));
        let want = any.then_some(Value::Int(expected));
        if *observed != want {
            let v = verdicts.iter_mut().find(|v| v.barrier_id.contains(r));
            let msg = format!("consolidated {:?}, sequential oracle {:?}", observed, want);
            if let Some(v) = v {
                v.violations.push((r.to_string(), msg));
            }
        }
        if closes_window {
            closed.push(*ci);
        }
    }
}

// ------------------------------------------------------------ enumeration

#[derive(Clone, Debug, Serialize)]
pub struct Counterexample {
    pub topology: String,
    pub failure: Failure,
    /// Delivery order as channel#seq.
    pub deliveries: Vec<String>,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
    /// The topology after shrinking, if smaller.
    pub shrunk: Option<TopologySpec>,
}

impl Counterexample {
    pub fn trace_tsv(&self) -> String {
        render_tsv(&self.trace)
    }
}

#[derive(Clone, Debug)]
pub enum Outcome {
    Pass { interleavings: u64, states: u64 },
    Counterexample(Box<Counterexample>),
    CapExceeded { interleavings: u64 },
}

struct Search {
    cap: u64,
    visited: Mutex<HashSet<u64>>,
    terminals: AtomicU64,
    abort: AtomicBool,
}

enum Stop {
    Fail(Vec<(ChannelId, u64)>, Failure, Vec<TraceEvent>),
    Cap,
}

fn dfs<W: Explorable>(w: W, s: &Search, record_trace: fn(&W) -> Vec<TraceEvent>) -> Result<(), Stop> {
    let mut stack = vec![w];
    while let Some(w) = stack.pop() {
        if s.abort.load(Ordering::Relaxed) {
            return Err(Stop::Cap);
        }
        if !s.visited.lock().expect("not poisoned").insert(w.key()) {
            continue;
        }
        let choices = w.choices();
        if choices.is_empty() {
            if let Err(f) = w.finish() {
                return Err(Stop::Fail(w.path().to_vec(), f, record_trace(&w)));
            }
            if s.terminals.fetch_add(1, Ordering::Relaxed) + 1 > s.cap {
                s.abort.store(true, Ordering::Relaxed);
                return Err(Stop::Cap);
            }
            continue;
        }
        for c in choices.into_iter().rev() {
            let mut next = w.clone();
            if let Err(f) = next.step(c) {
                return Err(Stop::Fail(next.path().to_vec(), f, record_trace(&next)));
            }
            stack.push(next);
        }
    }
    Ok(())
}

/// Visits every equivalence class of delivery orders from `root`. Returns
/// the number of distinct final states and of distinct states.
pub fn enumerate<W: Explorable>(
    root: W,
    cap: u64,
    record_trace: fn(&W) -> Vec<TraceEvent>,
) -> Result<(u64, u64), EnumError> {
    let run = |parallel: bool| -> Result<(u64, u64), Stop> {
        let s = Search {
            cap,
            visited: Mutex::new(HashSet::new()),
            terminals: AtomicU64::new(0),
            abort: AtomicBool::new(false),
        };
        if parallel {
            // widen breadth-first, then split the frontier across threads
            let mut frontier = vec![root.clone()];
            let want = 4 * rayon::current_num_threads().max(1);
            let mut seen = HashSet::new();
            for _ in 0..64 {
                if frontier.len() >= want || frontier.iter().all(|w| w.choices().is_empty()) {
                    break;
                }
                let mut next = Vec::new();
                for w in frontier {
                    let cs = w.choices();
                    if cs.is_empty() {
                        next.push(w);
                        continue;
                    }
                    for c in cs {
                        let mut n = w.clone();
                        if n.step(c).is_err() {
                            // let the sequential pass report it canonically
                            return Err(Stop::Cap);
                        }
                        if seen.insert(n.key()) {
                            next.push(n);
                        }
                    }
                }
                frontier = next;
            }
            let results: Vec<Result<(), Stop>> = frontier.into_par_iter().map(|w| dfs(w, &s, record_trace)).collect();
            for r in results {
                r?;
            }
        } else {
            dfs(root.clone(), &s, record_trace)?;
        }
        let states = s.visited.lock().expect("not poisoned").len() as u64;
        Ok((s.terminals.load(Ordering::Relaxed), states))
    };
    if rayon::current_num_threads() <= 1 {
        return match run(false) {
            Ok(r) => Ok(r),
            Err(Stop::Cap) => Err(EnumError::Cap(cap)),
            Err(Stop::Fail(path, f, trace)) => Err(EnumError::Fail(path, f, trace)),
        };
    }
    match run(true) {
        Ok(r) => Ok(r),
        Err(_) => match run(false) {
            Ok(r) => Ok(r),
            Err(Stop::Cap) => Err(EnumError::Cap(cap)),
            Err(Stop::Fail(path, f, trace)) => Err(EnumError::Fail(path, f, trace)),
        },
    }
}

pub enum EnumError {
    Cap(u64),
    Fail(Vec<(ChannelId, u64)>, Failure, Vec<TraceEvent>),
}

fn world_trace(w: &World) -> Vec<TraceEvent> {
    w.trace().to_vec()
}

/// Exhaustive check of one topology; counterexamples are shrunk.
pub fn check_barrier_safety(t: &TopologySpec, cap: u64) -> Result<Outcome, String> {
    let cap = t.cap.unwrap_or(cap);
    let root = World::new(t)?;
    Ok(match enumerate(root, cap, world_trace) {
        Ok((interleavings, states)) => Outcome::Pass { interleavings, states },
        Err(EnumError::Cap(n)) => Outcome::CapExceeded { interleavings: n },
        Err(EnumError::Fail(path, failure, trace)) => {
            let (shrunk, failure, path, trace) = shrink(t, cap, failure, path, trace);
            Outcome::Counterexample(Box::new(Counterexample {
                topology: t.name.clone(),
                failure,
                deliveries: path.iter().map(|(c, s)| format!("{c}#{s}")).collect(),
                trace,
                shrunk,
            }))
        }
    })
}

type Found = (Option<TopologySpec>, Failure, Vec<(ChannelId, u64)>, Vec<TraceEvent>);

/// Greedily drops data messages while the topology still fails.
fn shrink(t: &TopologySpec, cap: u64, failure: Failure, path: Vec<(ChannelId, u64)>, trace: Vec<TraceEvent>) -> Found {
    let mut best = (t.clone(), failure, path, trace);
    let mut improved = true;
    let mut changed = false;
    while improved {
        improved = false;
        for i in 0..best.0.upstreams.len() {
            for side in 0..2 {
                let mut c = best.0.clone();
                let n = if side == 0 { &mut c.upstreams[i].before } else { &mut c.upstreams[i].after };
                if *n == 0 {
                    continue;
                }
                *n -= 1;
                let Ok(root) = World::new(&c) else { continue };
                if let Err(EnumError::Fail(p, f, tr)) = enumerate(root, cap, world_trace) {
                    best = (c, f, p, tr);
                    improved = true;
                    changed = true;
                }
            }
        }
    }
    let (topo, f, p, tr) = best;
    (changed.then_some(topo), f, p, tr)
}

#[derive(Clone, Debug, Serialize)]
pub struct TopologyReport {
    pub name: String,
    pub verdict: &'static str,
    pub interleavings: u64,
    pub states: u64,
    pub detail: Option<String>,
}

/// Runs every topology, in parallel across topologies only through the
/// per-topology frontier split.
pub fn check_corpus(
    corpus: &[TopologySpec],
    cap: u64,
    mutants: &[Mutant],
) -> Vec<(TopologyReport, Option<Box<Counterexample>>)> {
    corpus
        .iter()
        .map(|t| {
            let mut t = t.clone();
            for m in mutants {
                if !t.mutants.iter().any(|x| x == m.name()) {
                    t.mutants.push(m.name().to_string());
                }
            }
            match check_barrier_safety(&t, cap) {
                Ok(Outcome::Pass { interleavings, states }) => (
                    TopologyReport { name: t.name.clone(), verdict: "pass", interleavings, states, detail: None },
                    None,
                ),
                Ok(Outcome::CapExceeded { interleavings }) => (
                    TopologyReport {
                        name: t.name.clone(),
                        verdict: "cap_exceeded",
                        interleavings,
                        states: 0,
                        detail: Some(format!("more than {interleavings} interleavings")),
                    },
                    None,
                ),
                Ok(Outcome::Counterexample(c)) => (
                    TopologyReport {
                        name: t.name.clone(),
                        verdict: "counterexample",
                        interleavings: 0,
                        states: 0,
                        detail: Some(c.failure.reason.clone()),
                    },
                    Some(c),
                ),
                Err(e) => (
                    TopologyReport {
                        name: t.name.clone(),
                        verdict: "invalid",
                        interleavings: 0,
                        states: 0,
                        detail: Some(e),
                    },
                    None,
                ),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BarrierId;

    fn topo(ups: &[(u32, u32, u32)], q: u32, critical: &str) -> TopologySpec {
        TopologySpec {
            name: "t".into(),
            upstreams: ups
                .iter()
                .map(|&(instances, before, after)| UpstreamSpec { instances, before, after, critical: true })
                .collect(),
            downstream: q,
            critical: critical.into(),
            after_target: None,
            mutants: Vec::new(),
            cap: None,
            source_direct: false,
        }
    }

    #[test]
    fn fully_ordered_topology_has_one_interleaving() {
        match check_barrier_safety(&topo(&[(1, 2, 0)], 1, "watermark"), DEFAULT_CAP).unwrap() {
            Outcome::Pass { interleavings, .. } => assert_eq!(interleavings, 1),
            o => panic!("{o:?}"),
        }
    }

    #[test]
    fn cap_refuses_with_count() {
        let mut t = topo(&[(2, 2, 1)], 2, "watermark");
        t.cap = Some(5);
        assert!(matches!(check_barrier_safety(&t, DEFAULT_CAP).unwrap(), Outcome::CapExceeded { interleavings: 5 }));
    }

    #[test]
    fn dropped_ack_lets_a_pending_message_in() {
        let mut t = topo(&[(2, 2, 1)], 2, "watermark");
        t.mutants.push("drop-sync-request-ack".into());
        let Outcome::Counterexample(c) = check_barrier_safety(&t, DEFAULT_CAP).unwrap() else { panic!("not detected") };
        assert!(c.failure.reason.contains("pending message executed before the critical"), "{}", c.failure.reason);
        assert!(!c.deliveries.is_empty() && !c.trace.is_empty());
        let v = &c.failure.verdicts[0];
        assert!(v.violations.iter().all(|(m, _)| v.pending_set.iter().any(|p| p.to_string() == *m)));
    }

    #[test]
    fn validation_names_fields() {
        let mut t = topo(&[(4, 1, 1)], 2, "watermark");
        assert!(t.validate().unwrap_err().contains("upstreams[0].instances"));
        t.upstreams[0].instances = 1;
        t.critical = "flush".into();
        assert!(t.validate().unwrap_err().contains("critical"));
    }

    /// Independent channels into one receiver, with no reactions.
    #[derive(Clone)]
    struct Merge {
        left: Vec<u32>,
        history: Vec<usize>,
        path: Vec<(ChannelId, u64)>,
    }

    fn chan(i: usize) -> ChannelId {
        let d = FunctionAddress::new(0, 0).instance(0, WorkerId(0));
        ChannelId::new(FunctionAddress::new(0, 1 + i as u32).instance(0, WorkerId(1)), d)
    }

    impl Explorable for Merge {
        fn choices(&self) -> Vec<ChannelId> {
            (0..self.left.len()).filter(|&i| self.left[i] > 0).map(chan).collect()
        }
        fn step(&mut self, c: ChannelId) -> Result<(), Failure> {
            let i = (0..self.left.len()).find(|&i| chan(i) == c).expect("known");
            self.left[i] -= 1;
            self.history.push(i);
            self.path.push((c, 0));
            Ok(())
        }
        fn key(&self) -> u64 {
            let mut h = DefaultHasher::new();
            self.history.hash(&mut h);
            h.finish()
        }
        fn finish(&self) -> Result<(), Failure> {
            Ok(())
        }
        fn path(&self) -> &[(ChannelId, u64)] {
            &self.path
        }
    }

    fn multinomial(ns: &[u32]) -> u64 {
        let f = |n: u32| (1..=n as u64).product::<u64>();
        f(ns.iter().sum()) / ns.iter().map(|&n| f(n)).product::<u64>()
    }

    #[test]
    fn enumeration_matches_multinomial() {
        for ns in [vec![1, 1], vec![2, 3], vec![3, 1, 2], vec![4, 4], vec![2, 2, 2]] {
            let m = Merge { left: ns.clone(), history: Vec::new(), path: Vec::new() };
            let (n, _) = enumerate(m, DEFAULT_CAP, |_| Vec::new()).ok().expect("no failure");
            assert_eq!(n, multinomial(&ns), "{ns:?}");
        }
    }

    // scripted traces for the set definitions

    fn inst(f: u32, i: u32) -> InstanceAddress {
        FunctionAddress::new(0, f).instance(i, WorkerId(f * 4 + i))
    }
    const D: u32 = 0;

    fn send(from: InstanceAddress, to: InstanceAddress, seq: u64, kind: MessageKind) -> TraceEvent {
        TraceEvent::new(0, from, TraceKind::Send(kind)).on(ChannelId::new(from, to), seq)
    }
    fn data(from: InstanceAddress, to: InstanceAddress, seq: u64) -> TraceEvent {
        send(from, to, seq, MessageKind::Data)
    }
    fn barrier(f: u32) -> BarrierId {
        BarrierId { function: FunctionAddress::new(0, f), epoch: 1 }
    }
    fn cm(from: InstanceAddress, to: InstanceAddress, seq: u64) -> TraceEvent {
        send(from, to, seq, MessageKind::Critical).barrier(barrier(from.function.function.0))
    }
    fn reply(from: InstanceAddress, lessor: InstanceAddress) -> TraceEvent {
        send(from, lessor, 0, MessageKind::Control(ControlKind::SyncReply)).barrier(barrier(lessor.function.function.0))
    }
    fn r(from: InstanceAddress, to: InstanceAddress, seq: u64) -> MsgRef {
        MsgRef { channel: ChannelId::new(from, to), seq }
    }
    fn d_fn() -> FunctionAddress {
        FunctionAddress::new(0, D)
    }

    #[test]
    fn lessor_only_dependency() {
        let (u, d) = (inst(1, 0), inst(D, 0));
        let mut t: Vec<TraceEvent> = (0..5).map(|s| data(u, d, s)).collect();
        t.push(cm(u, d, 5));
        t.push(data(u, d, 6));
        let c = [r(u, d, 5)];
        let want: BTreeSet<MsgRef> = (0..5).map(|s| r(u, d, s)).collect();
        assert_eq!(compute_dependency_set(&t, d_fn(), &c), want);
        // lessor message sent after the critical is pending
        assert_eq!(compute_pending_set(&t, d_fn(), &c), [r(u, d, 6)].into());
    }

    #[test]
    fn lessee_split_at_sync_reply() {
        let (u0, u1, d0, d1) = (inst(1, 0), inst(1, 1), inst(D, 0), inst(D, 1));
        let mut t: Vec<TraceEvent> = (0..3).map(|s| data(u1, d1, s)).collect();
        t.push(reply(u1, u0));
        t.push(cm(u0, d0, 0));
        t.push(data(u1, d1, 3));
        let c = [r(u0, d0, 0)];
        assert_eq!(compute_dependency_set(&t, d_fn(), &c), (0..3).map(|s| r(u1, d1, s)).collect());
        assert_eq!(compute_pending_set(&t, d_fn(), &c), [r(u1, d1, 3)].into());
    }

    #[test]
    fn reregistered_channel_after_reply_is_pending() {
        let (u0, u1, d0, d1) = (inst(1, 0), inst(1, 1), inst(D, 0), inst(D, 1));
        let t = vec![
            data(u1, d1, 0),
            reply(u1, u0),
            send(u1, d0, 0, MessageKind::Control(ControlKind::LesseeRegistration)),
            data(u1, d1, 1),
            cm(u0, d0, 0),
        ];
        let c = [r(u0, d0, 0)];
        assert_eq!(compute_dependency_set(&t, d_fn(), &c), [r(u1, d1, 0)].into());
        assert_eq!(compute_pending_set(&t, d_fn(), &c), [r(u1, d1, 1)].into());
    }

    #[test]
    fn global_barrier_is_the_union() {
        // two upstream actors, each a lessor and one lessee
        let (d0, d1) = (inst(D, 0), inst(D, 1));
        let mut t = Vec::new();
        let mut cms = Vec::new();
        let mut want = BTreeSet::new();
        for f in [1, 2] {
            let (a, b) = (inst(f, 0), inst(f, 1));
            t.extend([data(a, d0, 0), data(b, d1, 0), reply(b, a), data(b, d1, 1)]);
            t.push(cm(a, d0, 1));
            t.push(data(a, d1, 0));
            cms.push(r(a, d0, 1));
            want.extend([r(a, d0, 0), r(b, d1, 0)]);
        }
        assert_eq!(compute_dependency_set(&t, d_fn(), &cms), want);
        assert_eq!(compute_pending_set(&t, d_fn(), &cms).len(), 4);
        // one actor's critical alone covers only that actor
        assert_eq!(compute_dependency_set(&t, d_fn(), &cms[..1]).len(), 2);
    }

    #[test]
    fn unrelated_upstream_is_in_neither_set() {
        let (u, v, d) = (inst(1, 0), inst(2, 0), inst(D, 0));
        let t = vec![data(u, d, 0), data(v, d, 0), cm(u, d, 1), data(v, d, 1)];
        let c = [r(u, d, 1)];
        let dep = compute_dependency_set(&t, d_fn(), &c);
        let pend = compute_pending_set(&t, d_fn(), &c);
        assert_eq!(dep, [r(u, d, 0)].into());
        assert!(pend.is_empty());
        assert!(!dep.contains(&r(v, d, 0)) && !dep.contains(&r(v, d, 1)));
    }
}
