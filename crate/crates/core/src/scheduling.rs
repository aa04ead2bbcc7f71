//! The data-plane scheduling hooks and the built-in strategies.
//!
//! One strategy instance serves one worker. Hooks see only admitted
//! messages; anything a barrier withholds never reaches them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{FunctionAddress, InstanceAddress, JobId, SimTime, WorkerId};
use crate::protocol::Queued;

pub const EMA_ALPHA: f64 = 0.2;
pub const DEFAULT_PAUSE_NS: SimTime = 100_000_000;
pub const DEFAULT_TOKEN_INTERVAL_NS: SimTime = 100_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    AcceptLocal,
    /// Re-address to the instance with this index of the same function.
    Forward(u32),
}

/// What a hook may observe about the worker and the cluster.
#[derive(Clone, Copy, Debug)]
pub struct Ctx<'a> {
    pub now: SimTime,
    pub worker: WorkerId,
    /// Outstanding messages per worker, indexed by worker id.
    pub loads: &'a [u64],
}

impl Ctx<'_> {
    pub fn workers(&self) -> u32 {
        self.loads.len() as u32
    }
}

/// One mailbox's head as offered to `get_next_message`.
#[derive(Clone, Copy, Debug)]
pub struct Head<'a> {
    pub instance: InstanceAddress,
    pub msg: &'a Queued,
    pub backlog: usize,
}

pub trait SchedulingStrategy: Send {
    fn name(&self) -> &'static str;
    fn enqueue(&mut self, ctx: &Ctx, at: InstanceAddress, q: &Queued) -> Decision;
    fn get_next_message(&mut self, ctx: &Ctx, heads: &[Head]) -> Option<usize>;
    fn pre_apply(&mut self, ctx: &Ctx, at: InstanceAddress, q: &Queued);
    fn post_apply(&mut self, ctx: &Ctx, at: InstanceAddress, q: &Queued);
    /// Chooses the instance index an output to `target` goes to.
    fn prepare_send(&mut self, ctx: &Ctx, from: InstanceAddress, target: InstanceAddress, pinned: bool) -> u32;
    fn violation_feedback(&mut self, ctx: &Ctx, target: InstanceAddress, violated: bool);
    fn clone_box(&self) -> Box<dyn SchedulingStrategy>;
}

impl Clone for Box<dyn SchedulingStrategy> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Fifo,
    /// Least slack first, no autoscaling.
    SloPriority,
    /// Least slack first; the lessor forwards predicted violations.
    SloLessor,
    LessorRandom,
    UpstreamRoundRobin,
    UpstreamRandom,
    /// Least slack first; senders spread over unpaused lessees.
    SloUpstream,
    Token,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::Fifo,
        StrategyKind::SloPriority,
        StrategyKind::SloLessor,
        StrategyKind::LessorRandom,
        StrategyKind::UpstreamRoundRobin,
        StrategyKind::UpstreamRandom,
        StrategyKind::SloUpstream,
        StrategyKind::Token,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Fifo => "fifo",
            StrategyKind::SloPriority => "slo_priority",
            StrategyKind::SloLessor => "slo_lessor",
            StrategyKind::LessorRandom => "lessor_random",
            StrategyKind::UpstreamRoundRobin => "upstream_round_robin",
            StrategyKind::UpstreamRandom => "upstream_random",
            StrategyKind::SloUpstream => "slo_upstream",
            StrategyKind::Token => "token",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s || (s == "default" && *k == StrategyKind::Fifo))
    }

    fn slack_ordered(&self) -> bool {
        matches!(self, StrategyKind::SloPriority | StrategyKind::SloLessor | StrategyKind::SloUpstream)
    }

    fn upstream_initiated(&self) -> bool {
        matches!(self, StrategyKind::UpstreamRoundRobin | StrategyKind::UpstreamRandom | StrategyKind::SloUpstream)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyParams {
    /// Lessees per function the autoscaling strategies spread over.
    pub fanout: u32,
    pub pause_ns: SimTime,
    pub token_interval_ns: SimTime,
    pub tokens: BTreeMap<JobId, u32>,
    pub latency_targets: BTreeMap<JobId, SimTime>,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            fanout: 0,
            pause_ns: DEFAULT_PAUSE_NS,
            token_interval_ns: DEFAULT_TOKEN_INTERVAL_NS,
            tokens: BTreeMap::new(),
            latency_targets: BTreeMap::new(),
        }
    }
}

/// Per-function service-time estimates fed by the apply hooks.
#[derive(Clone, Debug, Default)]
pub struct ServiceStats {
    ema: BTreeMap<FunctionAddress, f64>,
    started: Option<(InstanceAddress, SimTime)>,
}

impl ServiceStats {
    pub fn start(&mut self, at: InstanceAddress, now: SimTime) {
        assert!(self.started.is_none(), "pre_apply while another message is timed");
        self.started = Some((at, now));
    }

    pub fn stop(&mut self, at: InstanceAddress, now: SimTime) {
        let (who, t0) = self.started.take().expect("post_apply without pre_apply");
        assert_eq!(who, at, "post_apply for a different instance");
        self.observe(at.function, now.saturating_sub(t0) as f64);
    }

    pub fn observe(&mut self, f: FunctionAddress, sample: f64) {
        self.ema.entry(f).and_modify(|e| *e = EMA_ALPHA * sample + (1.0 - EMA_ALPHA) * *e).or_insert(sample);
    }

    pub fn estimate(&self, f: FunctionAddress) -> f64 {
        self.ema.get(&f).copied().unwrap_or(0.0)
    }
}

/// Deadline minus now minus the estimated service time.
pub fn slack(deadline: Option<SimTime>, now: SimTime, estimate: f64) -> f64 {
    match deadline {
        Some(d) => d as f64 - now as f64 - estimate,
        None => f64::INFINITY,
    }
}

#[derive(Clone, Debug)]
pub struct BuiltinStrategy {
    kind: StrategyKind,
    params: StrategyParams,
    stats: ServiceStats,
    rng: ChaCha8Rng,
    rr: BTreeMap<FunctionAddress, u32>,
    paused: BTreeMap<(FunctionAddress, u32), SimTime>,
    tokens: BTreeMap<JobId, (u64, u32)>,
}

impl BuiltinStrategy {
    pub fn new(kind: StrategyKind, params: StrategyParams, seed: u64, worker: WorkerId) -> Self {
        let stream = seed ^ (u64::from(worker.0) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Self {
            kind,
            params,
            stats: ServiceStats::default(),
            rng: ChaCha8Rng::seed_from_u64(stream),
            rr: BTreeMap::new(),
            paused: BTreeMap::new(),
            tokens: BTreeMap::new(),
        }
    }

    pub fn stats(&self) -> &ServiceStats {
        &self.stats
    }

    fn deadline(&self, at: InstanceAddress, q: &Queued) -> Option<SimTime> {
        let target = self.params.latency_targets.get(&at.job())?;
        Some(q.msg.injected_at()? + target)
    }

    fn slack_of(&self, now: SimTime, h: &Head) -> f64 {
        slack(self.deadline(h.instance, h.msg), now, self.stats.estimate(h.instance.function))
    }

    fn take_token(&mut self, now: SimTime, job: JobId) -> bool {
        let Some(&share) = self.params.tokens.get(&job) else { return false };
        let interval = now / self.params.token_interval_ns.max(1);
        let slot = self.tokens.entry(job).or_insert((interval, share));
        if slot.0 != interval {
            *slot = (interval, share);
        }
        if slot.1 > 0 {
            slot.1 -= 1;
            true
        } else {
            false
        }
    }

    fn has_token(&self, now: SimTime, job: JobId) -> bool {
        let Some(&share) = self.params.tokens.get(&job) else { return false };
        let interval = now / self.params.token_interval_ns.max(1);
        match self.tokens.get(&job) {
            Some(&(i, left)) if i == interval => left > 0,
            _ => share > 0,
        }
    }

    fn is_paused(&self, now: SimTime, f: FunctionAddress, index: u32) -> bool {
        self.paused.get(&(f, index)).is_some_and(|&until| now < until)
    }
}

fn by_arrival(heads: &[Head]) -> Option<usize> {
    (0..heads.len()).min_by_key(|&i| heads[i].msg.arrival)
}

/// The lessee index hosted on worker `w` for a lessor on `lessor_worker`.
pub fn index_for_worker(lessor_worker: WorkerId, w: WorkerId, workers: u32) -> u32 {
    (w.0 + workers - lessor_worker.0) % workers
}

impl SchedulingStrategy for BuiltinStrategy {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn enqueue(&mut self, ctx: &Ctx, at: InstanceAddress, q: &Queued) -> Decision {
        if !at.is_lessor() || self.params.fanout == 0 {
            return Decision::AcceptLocal;
        }
        match self.kind {
            StrategyKind::LessorRandom => Decision::Forward(self.rng.random_range(0..=self.params.fanout)),
            StrategyKind::SloLessor => {
                let Some(deadline) = self.deadline(at, q) else { return Decision::AcceptLocal };
                let queued = ctx.loads.get(ctx.worker.0 as usize).copied().unwrap_or(0);
                let predicted = ctx.now as f64 + (queued + 1) as f64 * self.stats.estimate(at.function);
                if predicted <= deadline as f64 {
                    return Decision::AcceptLocal;
                }
                let n = ctx.workers();
                let reach = self.params.fanout.min(n.saturating_sub(1));
                // least outstanding among the lessor's worker and its lessee slots
                let best = (0..=reach)
                    .map(|i| WorkerId((at.worker.0 + i) % n))
                    .min_by_key(|w| (ctx.loads[w.0 as usize], w.0))
                    .expect("non-empty");
                match index_for_worker(at.worker, best, n) {
                    0 => Decision::AcceptLocal,
                    i => Decision::Forward(i),
                }
            }
            _ => Decision::AcceptLocal,
        }
    }

    fn get_next_message(&mut self, ctx: &Ctx, heads: &[Head]) -> Option<usize> {
        if heads.is_empty() {
            return None;
        }
        if self.kind.slack_ordered() {
            return (0..heads.len()).min_by(|&a, &b| {
                let (sa, sb) = (self.slack_of(ctx.now, &heads[a]), self.slack_of(ctx.now, &heads[b]));
                sa.total_cmp(&sb).then(heads[a].msg.arrival.cmp(&heads[b].msg.arrival))
            });
        }
        if self.kind == StrategyKind::Token {
            let tokened = (0..heads.len())
                .filter(|&i| self.has_token(ctx.now, heads[i].instance.job()))
                .min_by_key(|&i| heads[i].msg.arrival);
            if let Some(i) = tokened {
                self.take_token(ctx.now, heads[i].instance.job());
                return Some(i);
            }
        }
        by_arrival(heads)
    }

    fn pre_apply(&mut self, ctx: &Ctx, at: InstanceAddress, _q: &Queued) {
        self.stats.start(at, ctx.now);
    }

    fn post_apply(&mut self, ctx: &Ctx, at: InstanceAddress, _q: &Queued) {
        self.stats.stop(at, ctx.now);
    }

    fn prepare_send(&mut self, ctx: &Ctx, _from: InstanceAddress, target: InstanceAddress, pinned: bool) -> u32 {
        let fanout = self.params.fanout;
        if pinned || !self.kind.upstream_initiated() || fanout == 0 || !target.is_lessor() {
            return target.index;
        }
        let f = target.function;
        let slots = fanout + 1;
        match self.kind {
            StrategyKind::UpstreamRandom => self.rng.random_range(0..slots),
            StrategyKind::UpstreamRoundRobin => {
                let n = self.rr.entry(f).or_insert(0);
                *n += 1;
                *n % slots
            }
            _ => {
                for _ in 0..fanout {
                    let n = self.rr.entry(f).or_insert(0);
                    *n = *n % fanout + 1;
                    let candidate = *n;
                    if !self.is_paused(ctx.now, f, candidate) {
                        return candidate;
                    }
                }
                0
            }
        }
    }

    fn violation_feedback(&mut self, ctx: &Ctx, target: InstanceAddress, violated: bool) {
        if violated {
            self.paused.insert((target.function, target.index), ctx.now + self.params.pause_ns);
        }
    }

    fn clone_box(&self) -> Box<dyn SchedulingStrategy> {
        Box::new(self.clone())
    }
}
