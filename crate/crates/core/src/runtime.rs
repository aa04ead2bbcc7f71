//! Workers, the fetcher and worker steps, job registration and routing.
//!
//! The runtime is passive: a driver (the simulator or the checker) decides
//! when messages are delivered and when workers begin and complete work.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::DmaError;
use crate::model::{
    CriticalEvent, CriticalKind, Event, FunctionAddress, InstanceAddress, JobId, MessageKind, MsgId, Payload,
    SequencedMessage, SimTime, WorkerId,
};
use crate::operators::{Execution, IdSource, Operator, Output};
use crate::protocol::{Effects, FunctionWiring, Mailbox, ProtocolConfig, Queued};
use crate::scheduling::{Ctx, Decision, Head, SchedulingStrategy};
use crate::state::apply_update;
use crate::trace::{TraceEvent, TraceKind};

#[derive(Clone, Debug, PartialEq)]
pub struct FunctionSpec {
    pub id: u32,
    pub name: String,
    pub operator: Operator,
    pub worker: WorkerId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceSpec {
    pub id: u32,
    pub name: String,
    pub worker: WorkerId,
    pub targets: Vec<u32>,
    /// Send each event only to target `key % targets` instead of all.
    pub route_by_key: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataflowJob {
    pub id: JobId,
    pub functions: Vec<FunctionSpec>,
    pub edges: Vec<(u32, u32)>,
    pub sources: Vec<SourceSpec>,
}

impl DataflowJob {
    /// Function ids in topological order; errors on cycles or dangling edges.
    pub fn topo_order(&self) -> Result<Vec<u32>, DmaError> {
        let ids: BTreeSet<u32> = self.functions.iter().map(|f| f.id).collect();
        if ids.len() != self.functions.len() {
            return Err(DmaError::InvalidJob(format!("job {}: duplicate function id", self.id.0)));
        }
        let mut indeg: BTreeMap<u32, usize> = ids.iter().map(|&i| (i, 0)).collect();
        for &(a, b) in &self.edges {
            if !ids.contains(&a) || !ids.contains(&b) {
                return Err(DmaError::InvalidJob(format!(
                    "job {}: edge {a}->{b} names an unknown function",
                    self.id.0
                )));
            }
            *indeg.get_mut(&b).expect("known") += 1;
        }
        let mut ready: Vec<u32> = indeg.iter().filter(|(_, d)| **d == 0).map(|(i, _)| *i).collect();
        let mut order = Vec::new();
        while let Some(n) = ready.pop() {
            order.push(n);
            for &(a, b) in &self.edges {
                if a == n {
                    let d = indeg.get_mut(&b).expect("known");
                    *d -= 1;
                    if *d == 0 {
                        ready.push(b);
                    }
                }
            }
        }
        if order.len() != ids.len() {
            return Err(DmaError::InvalidJob(format!("job {}: edge graph has a cycle", self.id.0)));
        }
        Ok(order)
    }
}

#[derive(Clone, Debug)]
struct FunctionInfo {
    operator: Option<Operator>,
    wiring: Arc<FunctionWiring>,
    lessor: InstanceAddress,
}

#[derive(Clone)]
struct Worker {
    strategy: Box<dyn SchedulingStrategy>,
    hosted: BTreeSet<InstanceAddress>,
    executing: Option<(InstanceAddress, Queued)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JobCounters {
    /// Data messages created, by sources or by operators.
    pub generated: u64,
    pub executed: u64,
    pub failed: u64,
    pub forwarded: u64,
    pub criticals_executed: u64,
    /// Injection-to-execution spans of data executed at terminal functions.
    pub latencies: Vec<SimTime>,
    pub executed_by_job_interval: BTreeMap<u64, u64>,
}

/// What a worker started, so the driver can pick a service time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Started {
    pub instance: InstanceAddress,
    pub kind: MessageKind,
    pub msg: Option<MsgId>,
}

struct Ids<'a>(&'a mut u64);

impl IdSource for Ids<'_> {
    fn next_id(&mut self) -> MsgId {
        *self.0 += 1;
        MsgId(*self.0)
    }
}

#[derive(Clone)]
pub struct Runtime {
    pub cfg: ProtocolConfig,
    workers: Vec<Worker>,
    mailboxes: BTreeMap<InstanceAddress, Mailbox>,
    directory: BTreeMap<(FunctionAddress, u32), InstanceAddress>,
    functions: BTreeMap<FunctionAddress, FunctionInfo>,
    jobs: BTreeSet<JobId>,
    keyed_sources: BTreeSet<FunctionAddress>,
    outbox: Vec<SequencedMessage>,
    pub trace: Vec<TraceEvent>,
    pub violations: Vec<DmaError>,
    pub counters: BTreeMap<JobId, JobCounters>,
    pub latency_targets: BTreeMap<JobId, SimTime>,
    /// Width of the per-interval executed-count buckets.
    pub interval_ns: SimTime,
    arrival: u64,
    next_id: u64,
}

impl Runtime {
    pub fn new(strategies: Vec<Box<dyn SchedulingStrategy>>, cfg: ProtocolConfig) -> Self {
        let workers = strategies
            .into_iter()
            .map(|strategy| Worker { strategy, hosted: BTreeSet::new(), executing: None })
            .collect();
        Self {
            cfg,
            workers,
            mailboxes: BTreeMap::new(),
            directory: BTreeMap::new(),
            functions: BTreeMap::new(),
            jobs: BTreeSet::new(),
            keyed_sources: BTreeSet::new(),
            outbox: Vec::new(),
            trace: Vec::new(),
            violations: Vec::new(),
            counters: BTreeMap::new(),
            latency_targets: BTreeMap::new(),
            interval_ns: 100_000_000,
            arrival: 0,
            next_id: 0,
        }
    }

    pub fn worker_count(&self) -> u32 {
        self.workers.len() as u32
    }

    pub fn register_job(&mut self, job: &DataflowJob) -> Result<(), DmaError> {
        if !self.jobs.insert(job.id) {
            return Err(DmaError::InvalidJob(format!("job {} already registered", job.id.0)));
        }
        let result = self.wire_job(job);
        if result.is_err() {
            self.jobs.remove(&job.id);
        }
        result
    }

    fn wire_job(&mut self, job: &DataflowJob) -> Result<(), DmaError> {
        job.topo_order()?;
        let n = self.worker_count();
        let check_worker = |w: WorkerId, what: &str| {
            if w.0 >= n {
                Err(DmaError::InvalidJob(format!("{what} placed on worker {} of {n}", w.0)))
            } else {
                Ok(())
            }
        };
        for f in &job.functions {
            check_worker(f.worker, &format!("function {}", f.name))?;
        }
        for s in &job.sources {
            check_worker(s.worker, &format!("source {}", s.name))?;
            if job.functions.iter().any(|f| f.id == s.id) {
                return Err(DmaError::InvalidJob(format!("source {} reuses a function id", s.name)));
            }
        }
        let addr = |id: u32| FunctionAddress::new(job.id.0, id);
        let lessor_of = |id: u32| -> Result<InstanceAddress, DmaError> {
            job.functions
                .iter()
                .find(|f| f.id == id)
                .map(|f| addr(id).instance(0, f.worker))
                .ok_or_else(|| DmaError::InvalidJob(format!("unknown function {id}")))
        };
        for f in &job.functions {
            let mut upstreams: Vec<FunctionAddress> =
                job.edges.iter().filter(|e| e.1 == f.id).map(|e| addr(e.0)).collect();
            upstreams.extend(job.sources.iter().filter(|s| s.targets.contains(&f.id)).map(|s| addr(s.id)));
            let mut downstream = BTreeMap::new();
            for e in job.edges.iter().filter(|e| e.0 == f.id) {
                downstream.insert(addr(e.1), lessor_of(e.1)?);
            }
            let wiring = Arc::new(FunctionWiring {
                function: addr(f.id),
                upstreams,
                downstream_lessors: downstream,
                combining: f.operator.kind.combining().register(1000, u64::from(f.id))?,
                initial_state: f.operator.kind.initial_state(),
            });
            let lessor = addr(f.id).instance(0, f.worker);
            self.functions
                .insert(addr(f.id), FunctionInfo { operator: Some(f.operator), wiring: wiring.clone(), lessor });
            self.host(Mailbox::new_lessor(lessor, wiring, self.cfg));
        }
        for s in &job.sources {
            let mut downstream = BTreeMap::new();
            for t in &s.targets {
                downstream.insert(addr(*t), lessor_of(*t)?);
            }
            let wiring = Arc::new(FunctionWiring {
                function: addr(s.id),
                upstreams: Vec::new(),
                downstream_lessors: downstream,
                combining: crate::state::stateless(),
                initial_state: crate::state::ManagedState::Value(None),
            });
            let at = addr(s.id).instance(0, s.worker);
            if s.route_by_key {
                self.keyed_sources.insert(addr(s.id));
            }
            self.functions.insert(addr(s.id), FunctionInfo { operator: None, wiring: wiring.clone(), lessor: at });
            self.host(Mailbox::new_source(at, wiring, self.cfg));
        }
        self.counters.entry(job.id).or_default();
        Ok(())
    }

    fn host(&mut self, mb: Mailbox) {
        let at = mb.owner;
        self.workers[at.worker.0 as usize].hosted.insert(at);
        self.directory.insert((at.function, at.index), at);
        self.mailboxes.insert(at, mb);
    }

    // --------------------------------------------------------- inspection

    pub fn mailbox(&self, at: &InstanceAddress) -> Option<&Mailbox> {
        self.mailboxes.get(at)
    }

    pub fn mailboxes(&self) -> impl Iterator<Item = &Mailbox> {
        self.mailboxes.values()
    }

    pub fn lessor(&self, f: FunctionAddress) -> Option<InstanceAddress> {
        self.functions.get(&f).map(|i| i.lessor)
    }

    /// The address instance `index` of `f` has or would get.
    pub fn instance_for(&self, f: FunctionAddress, index: u32) -> InstanceAddress {
        if let Some(a) = self.directory.get(&(f, index)) {
            return *a;
        }
        let lessor = self.functions[&f].lessor;
        let w = (lessor.worker.0 + index) % self.worker_count();
        f.instance(index, WorkerId(w))
    }

    pub fn take_outbox(&mut self) -> Vec<SequencedMessage> {
        std::mem::take(&mut self.outbox)
    }

    pub fn is_worker_busy(&self, w: WorkerId) -> bool {
        self.workers[w.0 as usize].executing.is_some()
    }

    pub fn is_quiescent(&self) -> bool {
        self.outbox.is_empty()
            && self.workers.iter().all(|w| w.executing.is_none())
            && self.mailboxes.values().all(|m| m.is_quiescent())
    }

    /// Stages of every instance that still owes work.
    pub fn stuck_report(&self) -> Vec<String> {
        self.mailboxes
            .values()
            .filter(|m| !m.is_quiescent())
            .map(|m| format!("{}: {} ready={} withheld={}", m.owner, m.stage(), m.ready_len(), m.withheld_len()))
            .collect()
    }

    /// Data messages still inside mailboxes (ready, executing, withheld or buffered).
    pub fn resident_data(&self, job: JobId) -> u64 {
        let mut n = 0;
        for m in self.mailboxes.values().filter(|m| m.owner.job() == job) {
            n += m.withheld_data().filter(|q| q.msg.kind == MessageKind::Data).count() as u64;
            n += m.buffered_len() as u64;
        }
        for w in &self.workers {
            if let Some((at, q)) = &w.executing {
                if at.job() == job && q.msg.kind == MessageKind::Data {
                    n += 1;
                }
            }
        }
        n + self.ready_data(job)
    }

    fn ready_data(&self, job: JobId) -> u64 {
        self.mailboxes.values().filter(|m| m.owner.job() == job).map(|m| m.ready_data_len() as u64).sum()
    }

    pub fn loads(&self) -> Vec<u64> {
        self.workers
            .iter()
            .map(|w| {
                let queued: usize = w.hosted.iter().map(|a| self.mailboxes[a].ready_len()).sum();
                queued as u64 + u64::from(w.executing.is_some())
            })
            .collect()
    }

    // ---------------------------------------------------------- leases

    /// Creates lessee `index` of `f` with the lease already in place.
    pub fn lease(&mut self, f: FunctionAddress, index: u32) -> Result<InstanceAddress, DmaError> {
        let at = self.instance_for(f, index);
        let lessor = self.functions[&f].lessor;
        let mb = self.mailboxes.get_mut(&lessor).ok_or(DmaError::UnknownInstance(lessor))?;
        mb.add_lessee(at)?;
        if !self.mailboxes.contains_key(&at) {
            self.create_lessee(at, 0);
        }
        Ok(at)
    }

    /// Replaces an instance's partial state (load injection for overhead runs).
    pub fn seed_partial(&mut self, at: InstanceAddress, state: crate::state::ManagedState) -> Result<(), DmaError> {
        self.mailboxes.get_mut(&at).ok_or(DmaError::UnknownInstance(at))?.partial.state = state;
        Ok(())
    }

    /// Marks a sender-to-lessee channel as registered on both ends.
    pub fn activate_channel(&mut self, from: InstanceAddress, to: InstanceAddress) -> Result<(), DmaError> {
        self.mailboxes.get_mut(&from).ok_or(DmaError::UnknownInstance(from))?.activate_outbound(to);
        let c = crate::model::ChannelId::new(from, to);
        self.mailboxes.get_mut(&to).ok_or(DmaError::UnknownInstance(to))?.activate_inbound(c);
        Ok(())
    }

    fn create_lessee(&mut self, at: InstanceAddress, now: SimTime) {
        let info = &self.functions[&at.function];
        let mb = Mailbox::new_lessee(at, info.lessor, info.wiring.clone(), self.cfg);
        self.trace.push(TraceEvent::new(now, at, TraceKind::Create));
        self.host(mb);
    }

    // ---------------------------------------------------------- effects

    fn absorb(&mut self, fx: Effects) {
        for at in fx.create {
            if !self.mailboxes.contains_key(&at) {
                self.create_lessee(at, fx.now);
            }
        }
        self.trace.extend(fx.trace);
        self.outbox.extend(fx.out);
        self.violations.extend(fx.violations);
    }

    fn ctx_loads(&self) -> Vec<u64> {
        self.loads()
    }

    /// Strategy enqueue plus forwarding for one admitted message.
    fn admit(&mut self, at: InstanceAddress, q: Queued, now: SimTime) -> Result<(), DmaError> {
        let loads = self.ctx_loads();
        let ctx = Ctx { now, worker: at.worker, loads: &loads };
        let decision = self.workers[at.worker.0 as usize].strategy.enqueue(&ctx, at, &q);
        let mut fx = Effects::new(now);
        let mb = self.mailboxes.get_mut(&at).ok_or(DmaError::UnknownInstance(at))?;
        match decision {
            Decision::Forward(i) if i != at.index && mb.can_forward() => {
                let target = self.instance_for(at.function, i);
                let mb = self.mailboxes.get_mut(&at).expect("present");
                mb.forward(q, target, &mut fx)?;
                self.counters.entry(at.job()).or_default().forwarded += 1;
            }
            _ => mb.accept(q, &mut fx),
        }
        self.absorb(fx);
        Ok(())
    }

    /// Runs the protocol forward and re-enqueues whatever it released.
    fn settle(&mut self, at: InstanceAddress, now: SimTime) -> Result<(), DmaError> {
        loop {
            let mut fx = Effects::new(now);
            let mb = self.mailboxes.get_mut(&at).ok_or(DmaError::UnknownInstance(at))?;
            mb.progress(&mut fx)?;
            let released = mb.take_released();
            self.absorb(fx);
            if released.is_empty() {
                return Ok(());
            }
            for q in released {
                self.admit(at, q, now)?;
            }
        }
    }

    // ---------------------------------------------------------- fetcher

    /// Fetcher step for one delivered message.
    pub fn deliver(&mut self, msg: SequencedMessage, now: SimTime) -> Result<(), DmaError> {
        let at = msg.channel.target;
        self.arrival += 1;
        let mut fx = Effects::new(now);
        let mb = self.mailboxes.get_mut(&at).ok_or(DmaError::UnknownInstance(at))?;
        let admitted = mb.receive(msg, self.arrival, &mut fx)?;
        self.absorb(fx);
        if let Some(q) = admitted {
            self.admit(at, q, now)?;
        }
        self.settle(at, now)
    }

    // ---------------------------------------------------------- sources

    fn fresh_id(&mut self) -> MsgId {
        self.next_id += 1;
        MsgId(self.next_id)
    }

    /// A workload event entering at `source`.
    pub fn inject_data(&mut self, source: FunctionAddress, key: u64, value: i64, now: SimTime) -> Result<(), DmaError> {
        let at = self.functions.get(&source).ok_or(DmaError::InvalidJob("unknown source".into()))?.lessor;
        let mut targets: Vec<FunctionAddress> =
            self.functions[&source].wiring.downstream_lessors.keys().copied().collect();
        if self.keyed_sources.contains(&source) && !targets.is_empty() {
            targets = vec![targets[(key % targets.len() as u64) as usize]];
        }
        for g in targets {
            let event = Event { id: self.fresh_id(), key, value, event_time: now, injected_at: now };
            self.send_output(at, g, event, None, now)?;
        }
        Ok(())
    }

    pub fn inject_critical(
        &mut self,
        source: FunctionAddress,
        kind: CriticalKind,
        now: SimTime,
    ) -> Result<(), DmaError> {
        let at = self.functions.get(&source).ok_or(DmaError::InvalidJob("unknown source".into()))?.lessor;
        let targets: Vec<FunctionAddress> = self.functions[&source].wiring.downstream_lessors.keys().copied().collect();
        let events = targets
            .into_iter()
            .map(|g| (g, CriticalEvent { id: self.fresh_id(), kind, ts: now, injected_at: now }))
            .collect();
        let mut fx = Effects::new(now);
        self.mailboxes.get_mut(&at).expect("source hosted").inject_critical(events, &mut fx)?;
        self.absorb(fx);
        Ok(())
    }

    /// prepareSend plus transmission of one data output.
    fn send_output(
        &mut self,
        from: InstanceAddress,
        g: FunctionAddress,
        event: Event,
        pinned: Option<u32>,
        now: SimTime,
    ) -> Result<(), DmaError> {
        let lessor = self.functions[&g].lessor;
        let loads = self.ctx_loads();
        let ctx = Ctx { now, worker: from.worker, loads: &loads };
        let index = match pinned {
            Some(i) => i,
            None => self.workers[from.worker.0 as usize].strategy.prepare_send(&ctx, from, lessor, false),
        };
        let target = self.instance_for(g, index);
        self.counters.entry(from.job()).or_default().generated += 1;
        let mut fx = Effects::new(now);
        self.mailboxes.get_mut(&from).expect("sender hosted").send_data(target, event, &mut fx)?;
        self.absorb(fx);
        Ok(())
    }

    // ---------------------------------------------------------- worker

    /// getNextMessage and preApply on worker `w`, if it is idle and has work.
    pub fn begin(&mut self, w: WorkerId, now: SimTime) -> Option<Started> {
        let loads = self.ctx_loads();
        let worker = &mut self.workers[w.0 as usize];
        if worker.executing.is_some() {
            return None;
        }
        let heads: Vec<Head> = worker
            .hosted
            .iter()
            .filter_map(|a| {
                let mb = &self.mailboxes[a];
                mb.head().map(|msg| Head { instance: *a, msg, backlog: mb.ready_len() })
            })
            .collect();
        let ctx = Ctx { now, worker: w, loads: &loads };
        let pick = worker.strategy.get_next_message(&ctx, &heads)?;
        let at = heads[pick].instance;
        let q = self.mailboxes.get_mut(&at).expect("hosted").begin().expect("head exists");
        let stamp = |k| TraceEvent::new(now, at, k).on(q.msg.channel, q.msg.seq_id).msg(q.msg.msg_id());
        self.trace.push(stamp(TraceKind::GetNext));
        self.trace.push(stamp(TraceKind::PreApply));
        let worker = &mut self.workers[w.0 as usize];
        worker.strategy.pre_apply(&ctx, at, &q);
        let started = Started { instance: at, kind: q.msg.kind, msg: q.msg.msg_id() };
        worker.executing = Some((at, q));
        Some(started)
    }

    /// Runs the user function, sends outputs and calls postApply.
    pub fn complete(&mut self, w: WorkerId, now: SimTime) -> Result<(), DmaError> {
        let (at, q) = self.workers[w.0 as usize]
            .executing
            .take()
            .ok_or(DmaError::Protocol("complete on an idle worker".into()))?;
        let job = at.job();
        let info = self.functions[&at.function].clone();
        let op = info.operator.ok_or(DmaError::at(at, "sources do not execute"))?;
        let stamp = |k| TraceEvent::new(now, at, k).on(q.msg.channel, q.msg.seq_id).msg(q.msg.msg_id());
        let mb = self.mailboxes.get_mut(&at).expect("hosted");
        let barrier_critical = mb.executing_barrier_critical();
        let barrier = mb.current_barrier();
        let mut ids = Ids(&mut self.next_id);
        let result = apply_update(&mb.partial, &q.msg, |s, m| op.apply(s, m, &mut ids), self.cfg.list_limit);
        let (exec, failed) = match result {
            Ok((partial, exec)) => {
                mb.partial = partial;
                (exec, false)
            }
            Err(e) => {
                self.trace.push(stamp(TraceKind::Fail { reason: e.to_string() }));
                self.counters.entry(job).or_default().failed += 1;
                (Execution::default(), true)
            }
        };
        if !failed {
            match &q.msg.payload {
                Payload::Event(e) => {
                    self.trace.push(stamp(TraceKind::Apply { value: Some(e.value) }));
                    self.record_data_execution(at, &q, e, now);
                }
                _ => {
                    self.trace.push(stamp(TraceKind::Apply { value: None }));
                    let mut ev = stamp(TraceKind::CriticalApply { observed: exec.observed.clone() });
                    ev.barrier = barrier;
                    self.trace.push(ev);
                    self.counters.entry(job).or_default().criticals_executed += 1;
                }
            }
        }
        let downstream: Vec<FunctionAddress> = info.wiring.downstream_lessors.keys().copied().collect();
        for out in exec.outputs {
            match out {
                Output::Data { event, index } => {
                    for (n, g) in downstream.iter().enumerate() {
                        self.trace.push(stamp(TraceKind::PrepareSend));
                        let copy = if n == 0 { event.clone() } else { Event { id: self.fresh_id(), ..event.clone() } };
                        self.send_output(at, *g, copy, index, now)?;
                    }
                }
                Output::Critical(c) if barrier_critical => {
                    for (n, g) in downstream.iter().enumerate() {
                        self.trace.push(stamp(TraceKind::PrepareSend));
                        let copy = if n == 0 { c.clone() } else { CriticalEvent { id: self.fresh_id(), ..c.clone() } };
                        self.mailboxes.get_mut(&at).expect("hosted").collect_critical(*g, copy);
                    }
                }
                Output::Critical(_) => {}
            }
        }
        self.mailboxes.get_mut(&at).expect("hosted").finish_execution();
        self.trace.push(stamp(TraceKind::PostApply));
        let loads = self.ctx_loads();
        let ctx = Ctx { now, worker: w, loads: &loads };
        self.workers[w.0 as usize].strategy.post_apply(&ctx, at, &q);
        self.settle(at, now)
    }

    fn record_data_execution(&mut self, at: InstanceAddress, q: &Queued, e: &Event, now: SimTime) {
        let job = at.job();
        let terminal = self.functions[&at.function].wiring.downstream_lessors.is_empty();
        let interval = now / self.interval_ns.max(1);
        let c = self.counters.entry(job).or_default();
        c.executed += 1;
        *c.executed_by_job_interval.entry(interval).or_default() += 1;
        if terminal {
            c.latencies.push(now.saturating_sub(e.injected_at));
        }
        // out-of-band violation report to the sending worker's strategy
        if let Some(&target) = self.latency_targets.get(&job) {
            let sender = q.msg.channel.source;
            if !sender.is_lessor() || sender.function != at.function {
                let violated = now.saturating_sub(e.injected_at) > target;
                if violated {
                    let loads = self.ctx_loads();
                    let ctx = Ctx { now, worker: sender.worker, loads: &loads };
                    self.workers[sender.worker.0 as usize].strategy.violation_feedback(&ctx, at, true);
                    self.trace.push(TraceEvent::new(now, sender, TraceKind::Feedback { target: at, violated }));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::OperatorKind;
    use crate::scheduling::{BuiltinStrategy, StrategyKind, StrategyParams};

    pub fn fifo_runtime(workers: u32) -> Runtime {
        let strategies = (0..workers)
            .map(|w| {
                Box::new(BuiltinStrategy::new(StrategyKind::Fifo, StrategyParams::default(), 1, WorkerId(w)))
                    as Box<dyn SchedulingStrategy>
            })
            .collect();
        Runtime::new(strategies, ProtocolConfig::default())
    }

    fn three_stage() -> DataflowJob {
        let f = |id, name: &str, kind, w| FunctionSpec {
            id,
            name: name.into(),
            operator: Operator::new(kind),
            worker: WorkerId(w),
        };
        DataflowJob {
            id: JobId(0),
            functions: vec![
                f(0, "map", OperatorKind::Map, 0),
                f(1, "window", OperatorKind::WindowSum, 1),
                f(2, "aggregate", OperatorKind::WindowSum, 2),
            ],
            edges: vec![(0, 1), (1, 2)],
            sources: vec![SourceSpec {
                id: 10,
                name: "src".into(),
                worker: WorkerId(3),
                targets: vec![0],
                route_by_key: false,
            }],
        }
    }

    /// Delivers everything and runs every worker to completion, FIFO.
    fn drain(rt: &mut Runtime) {
        for _ in 0..10_000 {
            let out = rt.take_outbox();
            let mut progressed = !out.is_empty();
            for m in out {
                rt.deliver(m, 0).unwrap();
            }
            for w in 0..rt.worker_count() {
                if rt.begin(WorkerId(w), 0).is_some() {
                    rt.complete(WorkerId(w), 0).unwrap();
                    progressed = true;
                }
            }
            if !progressed {
                return;
            }
        }
        panic!("no quiescence");
    }

    #[test]
    fn registers_lessors_per_function() {
        let mut rt = fifo_runtime(4);
        rt.register_job(&three_stage()).unwrap();
        let lessors = rt.mailboxes().filter(|m| !m.is_source()).count();
        assert_eq!(lessors, 3);
        assert!(rt.register_job(&three_stage()).is_err());
        let mut cyclic = three_stage();
        cyclic.id = JobId(1);
        cyclic.edges.push((2, 0));
        assert!(matches!(rt.register_job(&cyclic), Err(DmaError::InvalidJob(_))));
        let mut bad = three_stage();
        bad.id = JobId(2);
        bad.functions[0].worker = WorkerId(99);
        assert!(rt.register_job(&bad).unwrap_err().to_string().contains("worker 99"));
    }

    #[test]
    fn single_function_no_channels() {
        let mut rt = fifo_runtime(1);
        let job = DataflowJob {
            id: JobId(0),
            functions: vec![FunctionSpec {
                id: 0,
                name: "solo".into(),
                operator: Operator::new(OperatorKind::Map),
                worker: WorkerId(0),
            }],
            edges: vec![],
            sources: vec![],
        };
        rt.register_job(&job).unwrap();
        assert_eq!(rt.mailboxes().count(), 1);
        assert!(rt.take_outbox().is_empty());
    }

    #[test]
    fn jobs_share_workers() {
        let mut rt = fifo_runtime(4);
        rt.register_job(&three_stage()).unwrap();
        let mut second = three_stage();
        second.id = JobId(1);
        rt.register_job(&second).unwrap();
        let on_w0: Vec<_> = rt.mailboxes().filter(|m| m.owner.worker == WorkerId(0)).map(|m| m.owner.job()).collect();
        assert_eq!(on_w0, vec![JobId(0), JobId(1)]);
    }

    #[test]
    fn watermark_flows_through_the_dag() {
        let mut rt = fifo_runtime(4);
        rt.register_job(&three_stage()).unwrap();
        let src = FunctionAddress::new(0, 10);
        for v in [10, 5, 4] {
            rt.inject_data(src, 0, v, 0).unwrap();
        }
        rt.inject_critical(src, CriticalKind::Watermark, 0).unwrap();
        drain(&mut rt);
        assert!(rt.is_quiescent(), "{:?}", rt.stuck_report());
        let observed: Vec<_> = rt
            .trace
            .iter()
            .filter_map(|e| match &e.kind {
                TraceKind::CriticalApply { observed } => Some((e.instance.function.function.0, observed.clone())),
                _ => None,
            })
            .collect();
        use crate::state::Value;
        assert_eq!(observed, vec![(0, None), (1, Some(Value::Int(19))), (2, Some(Value::Int(19)))]);
        crate::trace::audit_all(&rt.trace, false).unwrap();
    }

    #[test]
    fn source_holds_post_critical_data_until_sp_ack() {
        let params = StrategyParams { fanout: 1, ..Default::default() };
        let strategies = (0..3)
            .map(|w| {
                Box::new(BuiltinStrategy::new(StrategyKind::UpstreamRoundRobin, params.clone(), 1, WorkerId(w)))
                    as Box<dyn SchedulingStrategy>
            })
            .collect();
        let mut rt = Runtime::new(strategies, ProtocolConfig::default());
        let job = DataflowJob {
            id: JobId(0),
            functions: vec![FunctionSpec {
                id: 0,
                name: "m".into(),
                operator: Operator::new(OperatorKind::Map),
                worker: WorkerId(0),
            }],
            edges: vec![],
            sources: vec![SourceSpec {
                id: 1,
                name: "s".into(),
                worker: WorkerId(2),
                targets: vec![0],
                route_by_key: false,
            }],
        };
        rt.register_job(&job).unwrap();
        let (f, src) = (FunctionAddress::new(0, 0), FunctionAddress::new(0, 1));
        let lessee = rt.lease(f, 1).unwrap();
        let source = rt.lessor(src).unwrap();
        rt.activate_channel(source, lessee).unwrap();
        rt.inject_data(src, 0, 1, 0).unwrap();
        rt.inject_critical(src, CriticalKind::Watermark, 0).unwrap();
        rt.inject_data(src, 0, 2, 0).unwrap();
        let kinds: Vec<MessageKind> = rt.outbox.iter().map(|m| m.kind).collect();
        assert_eq!(
            kinds,
            vec![MessageKind::Data, MessageKind::Control(crate::model::ControlKind::SyncProgram)],
            "post-critical data held"
        );
        assert_eq!(rt.resident_data(JobId(0)), 1);
        drain(&mut rt);
        assert!(rt.is_quiescent(), "{:?}", rt.stuck_report());
        let at =
            |pred: &dyn Fn(&TraceEvent) -> bool| rt.trace.iter().position(|e| e.instance == source && pred(e)).unwrap();
        let acked = at(&|e| e.kind == TraceKind::Deliver(MessageKind::Control(crate::model::ControlKind::SpAck)));
        let released =
            at(&|e| e.kind == TraceKind::Send(MessageKind::Data) && e.channel.is_some_and(|c| c.target.is_lessor()));
        assert!(acked < released);
        crate::trace::audit_all(&rt.trace, false).unwrap();
    }

    #[test]
    fn one_message_one_transmit() {
        let mut rt = fifo_runtime(2);
        let job = DataflowJob {
            id: JobId(0),
            functions: vec![
                FunctionSpec {
                    id: 0,
                    name: "m".into(),
                    operator: Operator::new(OperatorKind::Map),
                    worker: WorkerId(0),
                },
                FunctionSpec {
                    id: 1,
                    name: "w".into(),
                    operator: Operator::new(OperatorKind::WindowSum),
                    worker: WorkerId(1),
                },
            ],
            edges: vec![(0, 1)],
            sources: vec![SourceSpec {
                id: 5,
                name: "s".into(),
                worker: WorkerId(0),
                targets: vec![0],
                route_by_key: false,
            }],
        };
        rt.register_job(&job).unwrap();
        rt.inject_data(FunctionAddress::new(0, 5), 1, 3, 0).unwrap();
        for m in rt.take_outbox() {
            rt.deliver(m, 0).unwrap();
        }
        assert!(rt.begin(WorkerId(1), 0).is_none(), "idle worker stays idle");
        rt.begin(WorkerId(0), 0).unwrap();
        rt.complete(WorkerId(0), 5).unwrap();
        let out = rt.take_outbox();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].seq_id, 0);
        assert_eq!(out[0].channel.target, FunctionAddress::new(0, 1).instance(0, WorkerId(1)));
    }
}
