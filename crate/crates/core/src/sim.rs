//! Deterministic discrete-event simulation: transport, fetcher and worker
//! timing, workload generators and metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto, Zipf};
use serde::Serialize;

use crate::error::DmaError;
use crate::model::{
    BarrierId, ChannelId, ControlKind, CriticalKind, FunctionAddress, JobId, MessageKind, SequencedMessage, SimTime,
    WorkerId,
};
use crate::protocol::{MailboxState, ProtocolConfig};
use crate::runtime::{DataflowJob, Runtime};
use crate::scheduling::{BuiltinStrategy, SchedulingStrategy, StrategyKind, StrategyParams};
use crate::state::{ManagedState, Value};
use crate::trace::{trace_hash, TraceEvent, TraceKind};

pub const MS: SimTime = 1_000_000;
pub const BURST_BUCKET_NS: SimTime = 100 * MS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NetworkModel {
    pub base_ns: SimTime,
    pub jitter_ns: SimTime,
    /// Serialization cost; zero disables the byte-proportional term.
    pub ns_per_byte: f64,
    /// Delay between instances on the same worker.
    pub local_ns: SimTime,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self { base_ns: MS, jitter_ns: 0, ns_per_byte: 0.0, local_ns: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ServiceModel {
    pub data_ns: SimTime,
    pub jitter_ns: SimTime,
    pub critical_ns: SimTime,
}

impl Default for ServiceModel {
    fn default() -> Self {
        Self { data_ns: MS, jitter_ns: 0, critical_ns: MS }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Arrivals {
    None,
    Constant {
        rate: f64,
    },
    /// Per-bucket volumes drawn from a Pareto law with this tail index.
    Pareto {
        alpha: f64,
        rate: f64,
    },
    /// (time_ns, key, value) rows.
    Replay(Vec<(SimTime, u64, i64)>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KeyDist {
    Uniform { n: u64 },
    Zipf { n: u64, s: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticalPlan {
    pub kind: CriticalKind,
    pub every_ns: SimTime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Workload {
    pub source: FunctionAddress,
    pub arrivals: Arrivals,
    pub keys: KeyDist,
    pub values: (i64, i64),
    pub criticals: Option<CriticalPlan>,
}

#[derive(Clone, Debug)]
pub struct SimSpec {
    pub workers: u32,
    pub jobs: Vec<DataflowJob>,
    pub job_names: BTreeMap<JobId, String>,
    pub strategy: StrategyKind,
    pub params: StrategyParams,
    pub protocol: ProtocolConfig,
    pub workloads: Vec<Workload>,
    pub net: NetworkModel,
    pub fetch_ns: SimTime,
    pub service: BTreeMap<FunctionAddress, ServiceModel>,
    pub default_service: ServiceModel,
    pub leases: Vec<(FunctionAddress, u32)>,
    pub seed: u64,
    pub duration_ns: SimTime,
    /// Extra time after the last injection to let work finish.
    pub drain_ns: SimTime,
}

impl SimSpec {
    pub fn new(workers: u32, jobs: Vec<DataflowJob>) -> Self {
        Self {
            workers,
            job_names: jobs.iter().map(|j| (j.id, format!("job{}", j.id.0))).collect(),
            jobs,
            strategy: StrategyKind::Fifo,
            params: StrategyParams::default(),
            protocol: ProtocolConfig::default(),
            workloads: Vec::new(),
            net: NetworkModel::default(),
            fetch_ns: 0,
            service: BTreeMap::new(),
            default_service: ServiceModel::default(),
            leases: Vec::new(),
            seed: 0,
            duration_ns: 1_000 * MS,
            drain_ns: 60_000 * MS,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("{error}")]
    Protocol { error: DmaError, tail: String },
}

impl From<DmaError> for SimError {
    fn from(e: DmaError) -> Self {
        match e {
            DmaError::InvalidJob(m) => SimError::Invalid(m),
            e => SimError::Protocol { error: e, tail: String::new() },
        }
    }
}

// ------------------------------------------------------------ generators

/// Scale so a Pareto(x_m, alpha) draw has the requested mean.
pub fn pareto_scale(mean: f64, alpha: f64) -> f64 {
    mean * (alpha - 1.0) / alpha
}

/// `n` per-bucket volumes with long-run mean `mean`.
pub fn pareto_volumes(alpha: f64, mean: f64, n: usize, seed: u64) -> Result<Vec<f64>, SimError> {
    if alpha.is_nan() || alpha <= 1.0 {
        return Err(SimError::Invalid(format!("pareto alpha must exceed 1, got {alpha}")));
    }
    let d = Pareto::new(pareto_scale(mean, alpha), alpha).map_err(|e| SimError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| d.sample(&mut rng)).collect())
}

/// Injection instants for Pareto bursts: one volume per 100 ms bucket,
/// spread uniformly inside the bucket.
pub fn generate_pareto_bursts(
    alpha: f64,
    mean_rate: f64,
    duration: SimTime,
    seed: u64,
) -> Result<Vec<SimTime>, SimError> {
    let buckets = duration.div_ceil(BURST_BUCKET_NS) as usize;
    let per_bucket = mean_rate * BURST_BUCKET_NS as f64 / 1e9;
    let volumes = pareto_volumes(alpha, per_bucket, buckets, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0B5);
    let mut out = Vec::new();
    for (b, v) in volumes.into_iter().enumerate() {
        let whole = v.floor();
        let n = whole as u64 + u64::from(rng.random::<f64>() < v - whole);
        let start = b as SimTime * BURST_BUCKET_NS;
        let mut ts: Vec<SimTime> =
            (0..n).map(|_| start + rng.random_range(0..BURST_BUCKET_NS)).filter(|t| *t < duration).collect();
        ts.sort_unstable();
        out.extend(ts);
    }
    Ok(out)
}

fn constant_arrivals(rate: f64, duration: SimTime, rng: &mut ChaCha8Rng) -> Vec<SimTime> {
    if rate <= 0.0 {
        return Vec::new();
    }
    let gap = 1e9 / rate;
    // random phase so parallel sources do not align
    let mut t = rng.random::<f64>() * gap;
    let mut out = Vec::new();
    while (t as SimTime) < duration {
        out.push(t as SimTime);
        t += gap;
    }
    out
}

/// Parses `time_ns\tkey\tvalue` lines; `#` starts a comment.
pub fn parse_replay(text: &str) -> Result<Vec<(SimTime, u64, i64)>, String> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(format!("line {}: expected 3 tab-separated fields", n + 1));
        }
        let bad = |what: &str| format!("line {}: bad {what}", n + 1);
        rows.push((
            f[0].parse().map_err(|_| bad("time_ns"))?,
            f[1].parse().map_err(|_| bad("key"))?,
            f[2].parse().map_err(|_| bad("value"))?,
        ));
    }
    rows.sort_by_key(|r| r.0);
    Ok(rows)
}

enum KeySampler {
    Uniform(u64),
    Zipf(Zipf<f64>),
}

impl KeySampler {
    fn new(d: KeyDist) -> Result<Self, SimError> {
        Ok(match d {
            KeyDist::Uniform { n } => KeySampler::Uniform(n.max(1)),
            KeyDist::Zipf { n, s } => {
                if s < 0.0 {
                    return Err(SimError::Invalid(format!("zipf s must be non-negative, got {s}")));
                }
                KeySampler::Zipf(Zipf::new(n.max(1) as f64, s).map_err(|e| SimError::Invalid(e.to_string()))?)
            }
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        match self {
            KeySampler::Uniform(n) => rng.random_range(0..*n),
            KeySampler::Zipf(z) => z.sample(rng) as u64 - 1,
        }
    }
}

// ------------------------------------------------------------ metrics

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[SimTime], p: f64) -> SimTime {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JobMetrics {
    pub job: String,
    pub outputs: u64,
    pub p50_ns: SimTime,
    pub p95_ns: SimTime,
    pub p99_ns: SimTime,
    pub latency_target_ns: Option<SimTime>,
    pub satisfaction_rate: f64,
    pub generated: u64,
    pub executed: u64,
    pub failed: u64,
    pub forwarded: u64,
    pub withheld_at_end: u64,
    pub in_flight_at_end: u64,
    pub criticals_executed: u64,
    /// Executed data messages per interval, in interval order.
    #[serde(skip)]
    pub executed_per_interval: BTreeMap<u64, u64>,
    #[serde(skip)]
    pub latencies: Vec<SimTime>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BarrierMetric {
    pub barrier: String,
    pub sync_ns: SimTime,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub jobs: Vec<JobMetrics>,
    pub barriers: Vec<BarrierMetric>,
    pub utilization: Vec<f64>,
    pub sim_end_ns: SimTime,
    pub trace_hash: String,
    pub quiescent: bool,
}

impl MetricsReport {
    pub fn job(&self, name: &str) -> Option<&JobMetrics> {
        self.jobs.iter().find(|j| j.job == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("job,metric,value\n");
        for j in &self.jobs {
            let rows: [(&str, String); 13] = [
                ("outputs", j.outputs.to_string()),
                ("p50_ns", j.p50_ns.to_string()),
                ("p95_ns", j.p95_ns.to_string()),
                ("p99_ns", j.p99_ns.to_string()),
                ("latency_target_ns", j.latency_target_ns.map_or("-".into(), |t| t.to_string())),
                ("satisfaction_rate", format!("{:.6}", j.satisfaction_rate)),
                ("generated", j.generated.to_string()),
                ("executed", j.executed.to_string()),
                ("failed", j.failed.to_string()),
                ("forwarded", j.forwarded.to_string()),
                ("withheld_at_end", j.withheld_at_end.to_string()),
                ("in_flight_at_end", j.in_flight_at_end.to_string()),
                ("criticals_executed", j.criticals_executed.to_string()),
            ];
            for (k, v) in rows {
                out.push_str(&format!("{},{k},{v}\n", j.job));
            }
        }
        for b in &self.barriers {
            out.push_str(&format!("*,sync_ns:{},{}\n", b.barrier, b.sync_ns));
        }
        for (w, u) in self.utilization.iter().enumerate() {
            out.push_str(&format!("*,utilization:w{w},{u:.6}\n"));
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "jobs": self.jobs.iter().map(|j| serde_json::json!({
                "job": j.job,
                "satisfaction_rate": j.satisfaction_rate,
                "p50_ns": j.p50_ns,
                "p95_ns": j.p95_ns,
                "p99_ns": j.p99_ns,
                "latency_target_ns": j.latency_target_ns,
                "outputs": j.outputs,
                "executed": j.executed,
                "forwarded": j.forwarded,
                "failed": j.failed,
            })).collect::<Vec<_>>(),
            "barriers": self.barriers,
            "utilization": self.utilization,
            "sim_end_ns": self.sim_end_ns,
            "trace_hash": self.trace_hash,
        })
    }
}

/// Lessor BLOCKED entry to the last lessee UNSYNC receipt.
pub fn measure_sync_duration(trace: &[TraceEvent], barrier: BarrierId) -> Result<SimTime, DmaError> {
    let mut blocked_at = None;
    let mut lessor_done = None;
    let mut last_unsync = None;
    let mut requests = 0usize;
    let mut unsyncs = 0usize;
    for e in trace.iter().filter(|e| e.barrier == Some(barrier)) {
        match &e.kind {
            TraceKind::Transition { from: MailboxState::Runnable, to: MailboxState::Blocked }
                if e.instance.is_lessor() =>
            {
                blocked_at = Some(e.time)
            }
            TraceKind::Transition { from: MailboxState::Critical, to: MailboxState::Runnable } => {
                lessor_done = Some(e.time)
            }
            TraceKind::Send(MessageKind::Control(ControlKind::SyncRequest)) => requests += 1,
            TraceKind::Deliver(MessageKind::Control(ControlKind::Unsync)) => {
                unsyncs += 1;
                last_unsync = Some(e.time);
            }
            _ => {}
        }
    }
    let start = blocked_at.ok_or_else(|| DmaError::IncompleteBarrier(barrier, "never blocked".into()))?;
    let Some(done) = lessor_done else {
        return Err(DmaError::IncompleteBarrier(barrier, "lessor never returned to RUNNABLE".into()));
    };
    if unsyncs < requests {
        return Err(DmaError::IncompleteBarrier(barrier, format!("{unsyncs} of {requests} lessees unsynced")));
    }
    Ok(last_unsync.unwrap_or(done).max(done) - start)
}

/// Every barrier a lessor blocked for, in start order.
pub fn barriers_in(trace: &[TraceEvent]) -> Vec<BarrierId> {
    let mut seen = Vec::new();
    for e in trace {
        if let (TraceKind::Transition { from: MailboxState::Runnable, to: MailboxState::Blocked }, Some(b)) =
            (&e.kind, e.barrier)
        {
            if e.instance.is_lessor() && !seen.contains(&b) {
                seen.push(b);
            }
        }
    }
    seen
}

// ------------------------------------------------------------ engine

#[derive(Debug)]
enum Ev {
    Arrive(WorkerId, SequencedMessage),
    FetchDone(WorkerId),
    ExecDone(WorkerId),
    Inject(usize),
    Critical(usize),
}

struct Scheduled {
    time: SimTime,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.seq) == (o.time, o.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, o: &Self) -> Ordering {
        (o.time, o.seq).cmp(&(self.time, self.seq))
    }
}

/// Time-ordered event queue; ties resolve by insertion order.
#[derive(Default)]
pub struct SimClock {
    now: SimTime,
    seq: u64,
    heap: BinaryHeap<Scheduled>,
}

impl SimClock {
    fn at(&mut self, time: SimTime, ev: Ev) {
        debug_assert!(time >= self.now);
        self.seq += 1;
        self.heap.push(Scheduled { time, seq: self.seq, ev });
    }

    fn pop(&mut self) -> Option<(SimTime, Ev)> {
        let s = self.heap.pop()?;
        self.now = s.time;
        Some((s.time, s.ev))
    }

    pub fn now(&self) -> SimTime {
        self.now
    }
}

struct WorkerSim {
    inbound: VecDeque<SequencedMessage>,
    fetching: bool,
    executing: bool,
    busy_since: SimTime,
    busy_ns: SimTime,
}

struct SourceFeed {
    source: FunctionAddress,
    rows: Vec<(SimTime, u64, i64)>,
    next: usize,
    criticals: Option<CriticalPlan>,
}

pub struct Simulation {
    pub rt: Runtime,
    spec: SimSpec,
    clock: SimClock,
    workers: Vec<WorkerSim>,
    feeds: Vec<SourceFeed>,
    channel_clear: BTreeMap<ChannelId, SimTime>,
    net_rng: ChaCha8Rng,
    svc_rng: ChaCha8Rng,
    in_transit_data: BTreeMap<JobId, u64>,
}

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

impl Simulation {
    pub fn new(spec: SimSpec) -> Result<Self, SimError> {
        if spec.workers == 0 {
            return Err(SimError::Invalid("workers must be at least 1".into()));
        }
        let strategies: Vec<Box<dyn SchedulingStrategy>> = (0..spec.workers)
            .map(|w| {
                Box::new(BuiltinStrategy::new(spec.strategy, spec.params.clone(), spec.seed, WorkerId(w)))
                    as Box<dyn SchedulingStrategy>
            })
            .collect();
        let mut rt = Runtime::new(strategies, spec.protocol);
        rt.latency_targets = spec.params.latency_targets.clone();
        rt.interval_ns = spec.params.token_interval_ns;
        for j in &spec.jobs {
            rt.register_job(j)?;
        }
        for &(f, i) in &spec.leases {
            if rt.lessor(f).is_none() {
                return Err(SimError::Invalid(format!("lease for unknown function {}/{}", f.job.0, f.function.0)));
            }
            rt.lease(f, i)?;
        }
        let mut feeds = Vec::new();
        for (n, w) in spec.workloads.iter().enumerate() {
            if rt.lessor(w.source).is_none() {
                return Err(SimError::Invalid(format!("workload {n} names an unknown source")));
            }
            let mut rng = stream(spec.seed, 0x5EED_0000 + n as u64);
            let times = match &w.arrivals {
                Arrivals::None => Vec::new(),
                Arrivals::Constant { rate } => constant_arrivals(*rate, spec.duration_ns, &mut rng),
                Arrivals::Pareto { alpha, rate } => {
                    generate_pareto_bursts(*alpha, *rate, spec.duration_ns, rng.random())?
                }
                Arrivals::Replay(rows) => {
                    feeds.push(SourceFeed { source: w.source, rows: rows.clone(), next: 0, criticals: w.criticals });
                    continue;
                }
            };
            let keys = KeySampler::new(w.keys)?;
            let (lo, hi) = w.values;
            if lo > hi {
                return Err(SimError::Invalid(format!("workload {n}: value range {lo}..{hi} is empty")));
            }
            let rows = times.into_iter().map(|t| (t, keys.sample(&mut rng), rng.random_range(lo..=hi))).collect();
            feeds.push(SourceFeed { source: w.source, rows, next: 0, criticals: w.criticals });
        }
        let workers = (0..spec.workers)
            .map(|_| WorkerSim {
                inbound: VecDeque::new(),
                fetching: false,
                executing: false,
                busy_since: 0,
                busy_ns: 0,
            })
            .collect();
        Ok(Self {
            rt,
            clock: SimClock::default(),
            workers,
            feeds,
            channel_clear: BTreeMap::new(),
            net_rng: stream(spec.seed, 0x4E37),
            svc_rng: stream(spec.seed, 0x5E2C),
            in_transit_data: BTreeMap::new(),
            spec,
        })
    }

    fn transport_delay(&mut self, m: &SequencedMessage) -> SimTime {
        let net = self.spec.net;
        if m.channel.source.worker == m.channel.target.worker {
            return net.local_ns;
        }
        let jitter = if net.jitter_ns > 0 { self.net_rng.random_range(0..=net.jitter_ns) } else { 0 };
        net.base_ns + jitter + (m.payload.size_bytes() as f64 * net.ns_per_byte) as SimTime
    }

    fn ship(&mut self, now: SimTime) {
        for m in self.rt.take_outbox() {
            let arrive = now + self.transport_delay(&m);
            // per-channel FIFO: never overtake an earlier message
            let clear = self.channel_clear.entry(m.channel).or_insert(0);
            let arrive = arrive.max(*clear);
            *clear = arrive;
            if m.kind == MessageKind::Data {
                *self.in_transit_data.entry(m.channel.source.job()).or_default() += 1;
            }
            self.clock.at(arrive, Ev::Arrive(m.channel.target.worker, m));
        }
    }

    fn service_time(&mut self, f: FunctionAddress, kind: MessageKind) -> SimTime {
        let m = self.spec.service.get(&f).copied().unwrap_or(self.spec.default_service);
        let base = if kind == MessageKind::Critical { m.critical_ns } else { m.data_ns };
        let jitter = if m.jitter_ns > 0 { self.svc_rng.random_range(0..=2 * m.jitter_ns) } else { m.jitter_ns };
        (base + jitter).saturating_sub(m.jitter_ns).max(1)
    }

    fn pump(&mut self, now: SimTime) {
        self.ship(now);
        for w in 0..self.workers.len() {
            let wid = WorkerId(w as u32);
            if !self.workers[w].fetching && !self.workers[w].inbound.is_empty() {
                self.workers[w].fetching = true;
                self.clock.at(now + self.spec.fetch_ns, Ev::FetchDone(wid));
            }
            if !self.workers[w].executing {
                if let Some(s) = self.rt.begin(wid, now) {
                    let d = self.service_time(s.instance.function, s.kind);
                    let ws = &mut self.workers[w];
                    ws.executing = true;
                    ws.busy_since = now;
                    self.clock.at(now + d, Ev::ExecDone(wid));
                }
            }
        }
    }

    fn fail(&self, error: DmaError) -> SimError {
        let tail = crate::trace::render_tsv(&self.rt.trace[self.rt.trace.len().saturating_sub(40)..]);
        SimError::Protocol { error, tail }
    }

    fn schedule_feed(&mut self, i: usize) {
        let f = &self.feeds[i];
        if let Some(&(t, _, _)) = f.rows.get(f.next) {
            self.clock.at(t, Ev::Inject(i));
        }
    }

    /// Runs to the end of the injection window plus drain time.
    pub fn run(mut self) -> Result<(MetricsReport, Vec<TraceEvent>), SimError> {
        for i in 0..self.feeds.len() {
            self.schedule_feed(i);
            if let Some(p) = self.feeds[i].criticals {
                if p.every_ns > 0 && p.every_ns <= self.spec.duration_ns {
                    self.clock.at(p.every_ns, Ev::Critical(i));
                }
            }
        }
        let horizon = self.spec.duration_ns + self.spec.drain_ns;
        while let Some((now, ev)) = self.clock.pop() {
            if now > horizon {
                break;
            }
            let r = match ev {
                Ev::Arrive(w, m) => {
                    self.workers[w.0 as usize].inbound.push_back(m);
                    Ok(())
                }
                Ev::FetchDone(w) => {
                    let ws = &mut self.workers[w.0 as usize];
                    ws.fetching = false;
                    let m = ws.inbound.pop_front().expect("fetch scheduled for a queued message");
                    if m.kind == MessageKind::Data {
                        *self.in_transit_data.get_mut(&m.channel.source.job()).expect("counted") -= 1;
                    }
                    self.rt.deliver(m, now)
                }
                Ev::ExecDone(w) => {
                    let ws = &mut self.workers[w.0 as usize];
                    ws.executing = false;
                    ws.busy_ns += now - ws.busy_since;
                    self.rt.complete(w, now)
                }
                Ev::Inject(i) => {
                    let f = &mut self.feeds[i];
                    let (_, key, value) = f.rows[f.next];
                    f.next += 1;
                    let src = f.source;
                    self.schedule_feed(i);
                    self.rt.inject_data(src, key, value, now)
                }
                Ev::Critical(i) => {
                    let p = self.feeds[i].criticals.expect("planned");
                    let next = now + p.every_ns;
                    if next <= self.spec.duration_ns {
                        self.clock.at(next, Ev::Critical(i));
                    }
                    self.rt.inject_critical(self.feeds[i].source, p.kind, now)
                }
            };
            if let Some(e) = r.err().or_else(|| self.rt.violations.first().cloned()) {
                return Err(self.fail(e));
            }
            self.pump(now);
        }
        let end = self.clock.now();
        Ok(self.report(end))
    }

    fn report(self, end: SimTime) -> (MetricsReport, Vec<TraceEvent>) {
        let mut jobs = Vec::new();
        for j in &self.spec.jobs {
            let c = self.rt.counters.get(&j.id).cloned().unwrap_or_default();
            let mut lat = c.latencies.clone();
            lat.sort_unstable();
            let target = self.spec.params.latency_targets.get(&j.id).copied();
            let satisfaction_rate = match target {
                Some(t) if !lat.is_empty() => lat.iter().filter(|&&l| l <= t).count() as f64 / lat.len() as f64,
                _ => 1.0,
            };
            let resident = self.rt.resident_data(j.id);
            let transit = self.in_transit_data.get(&j.id).copied().unwrap_or(0);
            jobs.push(JobMetrics {
                job: self.spec.job_names.get(&j.id).cloned().unwrap_or_else(|| format!("job{}", j.id.0)),
                outputs: lat.len() as u64,
                p50_ns: percentile(&lat, 50.0),
                p95_ns: percentile(&lat, 95.0),
                p99_ns: percentile(&lat, 99.0),
                latency_target_ns: target,
                satisfaction_rate,
                generated: c.generated,
                executed: c.executed,
                failed: c.failed,
                forwarded: c.forwarded,
                withheld_at_end: resident,
                in_flight_at_end: transit,
                criticals_executed: c.criticals_executed,
                executed_per_interval: c.executed_by_job_interval.clone(),
                latencies: lat,
            });
        }
        let barriers = barriers_in(&self.rt.trace)
            .into_iter()
            .filter_map(|b| {
                measure_sync_duration(&self.rt.trace, b)
                    .ok()
                    .map(|d| BarrierMetric { barrier: b.to_string(), sync_ns: d })
            })
            .collect();
        let span = end.max(1) as f64;
        let utilization = self.workers.iter().map(|w| w.busy_ns as f64 / span).collect();
        let report = MetricsReport {
            jobs,
            barriers,
            utilization,
            sim_end_ns: end,
            trace_hash: trace_hash(&self.rt.trace),
            quiescent: self.rt.is_quiescent(),
        };
        (report, self.rt.trace)
    }
}

pub fn run_scenario(spec: SimSpec) -> Result<(MetricsReport, Vec<TraceEvent>), SimError> {
    Simulation::new(spec)?.run()
}

/// generated = executed + failed + still resident + still in transit.
pub fn conservation_holds(j: &JobMetrics) -> bool {
    j.generated == j.executed + j.failed + j.withheld_at_end + j.in_flight_at_end
}

/// Twice the observed p99 of `job` run alone.
pub fn calibrate_latency_target(spec: &SimSpec, job: JobId) -> Result<SimTime, SimError> {
    let mut solo = spec.clone();
    solo.jobs.retain(|j| j.id == job);
    let sources: Vec<FunctionAddress> =
        solo.jobs.iter().flat_map(|j| j.sources.iter().map(move |s| FunctionAddress::new(j.id.0, s.id))).collect();
    solo.workloads.retain(|w| sources.contains(&w.source));
    solo.params.latency_targets.clear();
    let (r, _) = run_scenario(solo)?;
    let p99 = r.jobs.first().map_or(0, |j| j.p99_ns);
    Ok(2 * p99.max(1))
}

/// One function with `lessees` lessees each holding `state_bytes` of list
/// state; a single Read critical forces a consolidation. Returns the sync duration.
pub fn measure_overhead(
    lessees: u32,
    state_bytes: u64,
    net: NetworkModel,
    fetch_ns: SimTime,
    seed: u64,
) -> Result<SimTime, SimError> {
    use crate::operators::{Operator, OperatorKind};
    use crate::runtime::{FunctionSpec, SourceSpec};
    let workers = lessees + 1;
    let job = DataflowJob {
        id: JobId(0),
        functions: vec![FunctionSpec {
            id: 0,
            name: "agg".into(),
            operator: Operator::new(OperatorKind::WindowMedian),
            worker: WorkerId(0),
        }],
        edges: vec![],
        sources: vec![SourceSpec {
            id: 1,
            name: "src".into(),
            worker: WorkerId(0),
            targets: vec![0],
            route_by_key: false,
        }],
    };
    let f = FunctionAddress::new(0, 0);
    let mut spec = SimSpec::new(workers, vec![job]);
    spec.net = net;
    spec.fetch_ns = fetch_ns;
    spec.seed = seed;
    spec.duration_ns = 10 * MS;
    spec.leases = (1..=lessees).map(|i| (f, i)).collect();
    spec.protocol.list_limit = usize::MAX;
    spec.workloads.push(Workload {
        source: FunctionAddress::new(0, 1),
        arrivals: Arrivals::None,
        keys: KeyDist::Uniform { n: 1 },
        values: (0, 0),
        criticals: Some(CriticalPlan { kind: CriticalKind::Read, every_ns: 5 * MS }),
    });
    let mut sim = Simulation::new(spec)?;
    let per_lessee = (state_bytes / 8) as usize;
    for i in 1..=lessees {
        let at = sim.rt.instance_for(f, i);
        sim.rt.seed_partial(at, ManagedState::List(vec![Value::Int(1); per_lessee]))?;
    }
    let (_, trace) = sim.run()?;
    let b = *barriers_in(&trace).first().ok_or_else(|| SimError::Invalid("no barrier ran".into()))?;
    measure_sync_duration(&trace, b).map_err(SimError::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{Operator, OperatorKind};
    use crate::runtime::{FunctionSpec, SourceSpec};

    fn pipeline(job: u32, src_worker: u32, fn_worker: u32) -> DataflowJob {
        DataflowJob {
            id: JobId(job),
            functions: vec![FunctionSpec {
                id: 0,
                name: "map".into(),
                operator: Operator::new(OperatorKind::Map),
                worker: WorkerId(fn_worker),
            }],
            edges: vec![],
            sources: vec![SourceSpec {
                id: 1,
                name: "src".into(),
                worker: WorkerId(src_worker),
                targets: vec![0],
                route_by_key: false,
            }],
        }
    }

    fn constant(job: u32, rate: f64) -> Workload {
        Workload {
            source: FunctionAddress::new(job, 1),
            arrivals: Arrivals::Constant { rate },
            keys: KeyDist::Uniform { n: 16 },
            values: (1, 9),
            criticals: None,
        }
    }

    #[test]
    fn clock_orders_ties_by_insertion() {
        let mut c = SimClock::default();
        c.at(5, Ev::FetchDone(WorkerId(2)));
        c.at(5, Ev::FetchDone(WorkerId(1)));
        c.at(3, Ev::FetchDone(WorkerId(3)));
        let order: Vec<u32> = std::iter::from_fn(|| c.pop())
            .map(|(_, e)| match e {
                Ev::FetchDone(w) => w.0,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, [3, 2, 1]);
    }

    #[test]
    fn empty_workload_is_all_zero_with_full_satisfaction() {
        let spec = SimSpec::new(2, vec![pipeline(0, 0, 1)]);
        let (r, _) = run_scenario(spec).unwrap();
        let j = &r.jobs[0];
        assert_eq!((j.generated, j.executed, j.outputs, j.p99_ns), (0, 0, 0, 0));
        assert_eq!(j.satisfaction_rate, 1.0);
    }

    #[test]
    fn light_load_latency_is_service_plus_transport() {
        // rate far below capacity: no queueing, so p50 = delay + service
        let mut spec = SimSpec::new(2, vec![pipeline(0, 0, 1)]);
        spec.workloads.push(constant(0, 100.0));
        spec.net.base_ns = 2 * MS;
        spec.default_service.data_ns = 3 * MS;
        spec.duration_ns = 2_000 * MS;
        let (r, trace) = run_scenario(spec).unwrap();
        let j = &r.jobs[0];
        assert_eq!(j.outputs, 200);
        assert_eq!(j.p50_ns, 5 * MS);
        assert_eq!(j.p99_ns, 5 * MS);
        assert!(conservation_holds(j));
        crate::trace::audit_all(&trace, false).unwrap();
    }

    #[test]
    fn same_seed_same_trace() {
        let mk = |seed| {
            let mut spec = SimSpec::new(3, vec![pipeline(0, 0, 1)]);
            let mut w = constant(0, 0.0);
            w.arrivals = Arrivals::Pareto { alpha: 2.5, rate: 300.0 };
            spec.workloads.push(w);
            spec.net.jitter_ns = MS;
            spec.seed = seed;
            run_scenario(spec).unwrap().0.trace_hash
        };
        assert_eq!(mk(4), mk(4));
        assert_ne!(mk(4), mk(5));
    }

    #[test]
    fn pareto_validation_and_shape() {
        assert!(pareto_volumes(1.0, 10.0, 10, 0).is_err());
        assert!(generate_pareto_bursts(0.5, 10.0, MS, 0).is_err());
        let ratio = |alpha| {
            let v = pareto_volumes(alpha, 10.0, 100_000, 11).unwrap();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().cloned().fold(0.0, f64::max) / mean
        };
        assert!(ratio(2.5) > ratio(5.0));
        for alpha in [5.0, 3.3, 2.5] {
            let v = pareto_volumes(alpha, 10.0, 1_000_000, 3).unwrap();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            assert!((mean - 10.0).abs() / 10.0 < 0.02, "alpha {alpha}: mean {mean}");
        }
        let v = pareto_volumes(100.0, 10.0, 100_000, 3).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!(sd / mean < 0.15);
    }

    #[test]
    fn percentiles_are_nearest_rank() {
        let v: Vec<SimTime> = (1..=100).collect();
        assert_eq!((percentile(&v, 50.0), percentile(&v, 95.0), percentile(&v, 99.0)), (50, 95, 99));
        assert_eq!(percentile(&[7], 99.0), 7);
        assert_eq!(percentile(&[], 50.0), 0);
    }

    #[test]
    fn replay_rows_parse() {
        let rows = parse_replay("# t\tk\tv\n20\t1\t-3\n10\t2\t4\n").unwrap();
        assert_eq!(rows, vec![(10, 2, 4), (20, 1, -3)]);
        assert!(parse_replay("1\t2").unwrap_err().contains("line 1"));
    }

    #[test]
    fn zero_lessee_sync_is_lessor_span() {
        let d = measure_overhead(0, 0, NetworkModel::default(), 0, 1).unwrap();
        // blocked and back to runnable around the critical's service time
        assert_eq!(d, ServiceModel::default().critical_ns);
    }

    #[test]
    fn sync_duration_lower_bound_with_two_lessees() {
        let net = NetworkModel { base_ns: 2 * MS, ..Default::default() };
        let d = measure_overhead(2, 0, net, 0, 1).unwrap();
        // request out, reply back, then unsync out
        assert!(d >= 3 * net.base_ns, "{d}");
    }

    #[test]
    fn incomplete_barrier_names_stage() {
        let b = BarrierId { function: FunctionAddress::new(0, 0), epoch: 1 };
        let err = measure_sync_duration(&[], b).unwrap_err();
        assert!(err.to_string().contains("never blocked"));
    }
}
