//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line to stderr (uncaptured) before asserting.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use dmactor::checker::{self, DEFAULT_CAP};
use dmactor::model::{CriticalKind, FunctionAddress, JobId, WorkerId};
use dmactor::operators::{Operator, OperatorKind};
use dmactor::protocol::Mutant;
use dmactor::runtime::{DataflowJob, FunctionSpec, SourceSpec};
use dmactor::scenario::{self, ScenarioFile};
use dmactor::scheduling::StrategyKind;
use dmactor::sim::{
    self, Arrivals, CriticalPlan, KeyDist, MetricsReport, NetworkModel, ServiceModel, SimSpec, Workload, MS,
};
use dmactor::state::Value;
use dmactor::trace::{audit_all, render_tsv, TraceEvent, TraceKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;
const REQUIRED: usize = 8;

fn report(n: u32, name: &str, result: Result<String, String>) {
    let line = match &result {
        Ok(d) => format!("PASS criterion {n} {name}: {d}"),
        Err(d) => format!("FAIL criterion {n} {name}: {d}"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
    if let Err(d) = result {
        panic!("criterion {n} {name}: {d}");
    }
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn scenario_file(name: &str) -> ScenarioFile {
    let path = root().join("scenarios").join(name);
    let text = std::fs::read_to_string(&path).unwrap();
    scenario::parse_str(&text, &path.display().to_string()).unwrap()
}

/// Runs a scenario and audits its trace.
fn run(file: ScenarioFile) -> Result<(MetricsReport, Vec<TraceEvent>), String> {
    let s = scenario::build(file, Some(&root().join("scenarios"))).map_err(|e| e.to_string())?;
    let (r, trace) = s.run().map_err(|e| e.to_string())?;
    audit_all(&trace, !r.quiescent).map_err(|e| format!("trace audit: {e}"))?;
    Ok((r, trace))
}

fn median(xs: &mut [u64]) -> u64 {
    xs.sort_unstable();
    xs[(xs.len() - 1) / 2]
}

#[test]
fn c01_barrier_safety_exhaustive() {
    let result = (|| {
        let corpus = checker::load_corpus(&root().join("corpus"))?;
        let mut ns = BTreeSet::new();
        let mut ps = BTreeSet::new();
        let mut qs = BTreeSet::new();
        let mut grans = BTreeSet::new();
        for t in &corpus {
            ns.insert(t.upstreams.len());
            ps.extend(t.upstreams.iter().map(|u| u.instances));
            qs.insert(t.downstream);
            grans.insert(format!("{:?}", t.granularity()?));
        }
        let want_ps: BTreeSet<u32> = [1, 2, 3].into();
        if corpus.len() < 12 || ns != [1, 2].into() || ps != want_ps || qs != want_ps || grans.len() != 2 {
            return Err(format!(
                "corpus coverage too small: {} topologies, N {ns:?}, P {ps:?}, Q {qs:?}, granularities {grans:?}",
                corpus.len()
            ));
        }
        let start = Instant::now();
        let mut total = 0;
        let mut largest = 0;
        for (r, _) in checker::check_corpus(&corpus, DEFAULT_CAP, &[]) {
            if r.verdict != "pass" {
                return Err(format!("{}: {} {}", r.name, r.verdict, r.detail.unwrap_or_default()));
            }
            total += r.interleavings;
            largest = largest.max(r.interleavings);
        }
        let secs = start.elapsed().as_secs_f64();
        if secs >= 600.0 {
            return Err(format!("took {secs:.0}s"));
        }
        Ok(format!(
            "{} topologies pass, {total} interleavings (largest {largest}, cap {DEFAULT_CAP}), {secs:.1}s",
            corpus.len()
        ))
    })();
    report(1, "barrier-safety", result);
}

#[test]
fn c02_mutation_sensitivity() {
    let result = (|| {
        let out = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut detected = Vec::new();
        let mut missed = Vec::new();
        for m in Mutant::ALL {
            let dir = out.path().join(m.name());
            let o = Command::new(env!("CARGO_BIN_EXE_dmactor"))
                .arg("check")
                .arg(root().join("corpus"))
                .args(["--mutant", m.name()])
                .arg("--out")
                .arg(&dir)
                .output()
                .map_err(|e| e.to_string())?;
            let json = std::fs::read_dir(&dir)
                .map(|d| d.flatten().filter(|e| e.path().extension().is_some_and(|x| x == "json")).count())
                .unwrap_or(0);
            if o.status.code() == Some(3) && json > 0 {
                detected.push(format!("{} ({json} counterexamples)", m.name()));
            } else {
                missed.push(format!("{} (exit {:?}, {json} json)", m.name(), o.status.code()));
            }
        }
        if missed.is_empty() {
            Ok(format!("detected {}", detected.join(", ")))
        } else {
            Err(format!("missed {}", missed.join(", ")))
        }
    })();
    report(2, "mutation-sensitivity", result);
}

const WINDOW_NS: u64 = 20 * MS;
const WINDOWS: u64 = 5;
const MAP_FACTOR: i64 = 3;

struct AggRun {
    kind: OperatorKind,
    inputs: Vec<(u64, u64, i64)>,
    spec: SimSpec,
}

/// A randomized source -> map -> window DAG with autoscaling on both stages.
fn aggregation_run(seed: u64) -> AggRun {
    let kinds =
        [OperatorKind::WindowSum, OperatorKind::WindowMax, OperatorKind::WindowAverage, OperatorKind::WindowMedian];
    let strategies = [
        StrategyKind::LessorRandom,
        StrategyKind::UpstreamRoundRobin,
        StrategyKind::UpstreamRandom,
        StrategyKind::SloLessor,
        StrategyKind::SloUpstream,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = kinds[(seed % 4) as usize];
    let workers = 6;
    let mut map = Operator::new(OperatorKind::Map);
    map.factor = MAP_FACTOR;
    let job = DataflowJob {
        id: JobId(0),
        functions: vec![
            FunctionSpec { id: 0, name: "map".into(), operator: map, worker: WorkerId(0) },
            FunctionSpec {
                id: 1,
                name: "window".into(),
                operator: Operator::new(kind),
                worker: WorkerId(rng.random_range(0..workers)),
            },
        ],
        edges: vec![(0, 1)],
        sources: vec![SourceSpec {
            id: 2,
            name: "src".into(),
            worker: WorkerId(0),
            targets: vec![0],
            route_by_key: false,
        }],
    };
    let mut spec = SimSpec::new(workers, vec![job]);
    spec.strategy = strategies[rng.random_range(0..strategies.len())];
    spec.params.fanout = rng.random_range(1..=4);
    spec.params.pause_ns = rng.random_range(1..=20) * MS;
    spec.params.latency_targets.insert(JobId(0), rng.random_range(1..=5) * MS);
    spec.net = NetworkModel {
        base_ns: rng.random_range(100..=1000) * 1000,
        jitter_ns: rng.random_range(0..=2000) * 1000,
        ns_per_byte: 0.0,
        local_ns: rng.random_range(0..=50) * 1000,
    };
    spec.fetch_ns = rng.random_range(0..=30) * 1000;
    spec.default_service = ServiceModel {
        data_ns: rng.random_range(100..=1500) * 1000,
        jitter_ns: rng.random_range(0..=100) * 1000,
        critical_ns: rng.random_range(100..=1000) * 1000,
    };
    let map_f = FunctionAddress::new(0, 0);
    let win_f = FunctionAddress::new(0, 1);
    spec.leases = (1..=rng.random_range(0..=2)).map(|i| (map_f, i)).collect();
    spec.leases.extend((1..=rng.random_range(0..=4)).map(|i| (win_f, i)));
    spec.seed = seed;
    spec.duration_ns = WINDOW_NS * WINDOWS;
    spec.drain_ns = 10_000 * MS;
    let n = rng.random_range(10..=150);
    let mut inputs: Vec<(u64, u64, i64)> = (0..n)
        .map(|_| (rng.random_range(0..spec.duration_ns), rng.random_range(0..8), rng.random_range(-1000..=1000)))
        .filter(|(t, _, _)| t % WINDOW_NS != 0)
        .collect();
    inputs.sort_by_key(|r| r.0);
    spec.workloads.push(Workload {
        source: FunctionAddress::new(0, 2),
        arrivals: Arrivals::Replay(inputs.clone()),
        keys: KeyDist::Uniform { n: 1 },
        values: (0, 0),
        criticals: Some(CriticalPlan { kind: CriticalKind::Watermark, every_ns: WINDOW_NS }),
    });
    AggRun { kind, inputs, spec }
}

/// Sequential single-instance aggregate of one window.
fn oracle(kind: OperatorKind, values: &[i64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(match kind {
        OperatorKind::WindowSum => values.iter().sum::<i64>() as f64,
        OperatorKind::WindowMax => *values.iter().max().unwrap() as f64,
        OperatorKind::WindowAverage => values.iter().sum::<i64>() as f64 / values.len() as f64,
        OperatorKind::WindowMedian => {
            let mut v = values.to_vec();
            v.sort_unstable();
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2] as f64
            } else {
                (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
            }
        }
        _ => unreachable!(),
    })
}

fn matches(kind: OperatorKind, observed: &Option<Value>, expected: Option<f64>) -> bool {
    match (observed, expected) {
        (None, None) => true,
        (Some(Value::Int(x)), Some(e)) if matches!(kind, OperatorKind::WindowSum | OperatorKind::WindowMax) => {
            *x as f64 == e
        }
        (Some(Value::Float(x)), Some(e))
            if matches!(kind, OperatorKind::WindowAverage | OperatorKind::WindowMedian) =>
        {
            (x - e).abs() <= 1e-9 * e.abs().max(1.0)
        }
        _ => false,
    }
}

#[test]
fn c03_consolidation_equivalence() {
    let result = (|| {
        let mut barriers = 0;
        let mut forwarded = 0;
        let mut multi_instance = 0;
        for seed in 0..1000 {
            let AggRun { kind, inputs, spec } = aggregation_run(seed);
            let label = format!("seed {seed} {} {}", kind.name(), spec.strategy.name());
            let (r, trace) = sim::run_scenario(spec).map_err(|e| format!("{label}: {e}"))?;
            audit_all(&trace, false).map_err(|e| format!("{label}: {e}"))?;
            let observed: Vec<&Option<Value>> = trace
                .iter()
                .filter(|e| e.instance.function == FunctionAddress::new(0, 1) && e.instance.is_lessor())
                .filter_map(|e| match &e.kind {
                    TraceKind::CriticalApply { observed } => Some(observed),
                    _ => None,
                })
                .collect();
            if observed.len() as u64 != WINDOWS {
                return Err(format!("{label}: {} window closes, expected {WINDOWS}", observed.len()));
            }
            for (k, obs) in observed.iter().enumerate() {
                let (lo, hi) = (k as u64 * WINDOW_NS, (k as u64 + 1) * WINDOW_NS);
                let vals: Vec<i64> =
                    inputs.iter().filter(|(t, _, _)| *t >= lo && *t < hi).map(|(_, _, v)| v * MAP_FACTOR).collect();
                let want = oracle(kind, &vals);
                if !matches(kind, obs, want) {
                    return Err(format!("{label}: window {k} observed {obs:?}, oracle {want:?}"));
                }
                barriers += 1;
            }
            forwarded += r.jobs[0].forwarded;
            let lessee_execs = trace.iter().any(|e| {
                matches!(e.kind, TraceKind::Apply { .. })
                    && !e.instance.is_lessor()
                    && e.instance.function.function.0 == 1
            });
            multi_instance += lessee_execs as u32;
        }
        if multi_instance < 500 {
            return Err(format!("only {multi_instance} of 1000 runs executed on a window lessee"));
        }
        Ok(format!(
            "1000 runs, {barriers} window closes match the sequential oracle; {multi_instance} runs used window lessees, {forwarded} lessor forwards"
        ))
    })();
    report(3, "consolidation-equivalence", result);
}

#[test]
fn c04_strategy_trend_fanout() {
    let result = (|| {
        let mut table = Vec::new();
        let mut wins = 0;
        for n in [2u32, 4, 8, 16] {
            let mut up = Vec::new();
            let mut lessor = Vec::new();
            for seed in 0..SEEDS {
                for (strategy, out) in [("upstream_round_robin", &mut up), ("lessor_random", &mut lessor)] {
                    let mut f = scenario_file("fanout.toml");
                    f.seed = seed;
                    f.strategy.name = strategy.into();
                    f.strategy.fanout = n;
                    f.jobs[0].functions[0].lessees = n;
                    f.jobs[0].sources[0].workload.rate = 600.0 * (n + 1) as f64;
                    out.push(run(f)?.0.jobs[0].p50_ns);
                }
            }
            if n == 16 {
                wins = up.iter().zip(&lessor).filter(|(u, l)| u <= l).count();
            }
            table.push(format!("n={n} upstream {}us lessor {}us", median(&mut up) / 1000, median(&mut lessor) / 1000));
        }
        let detail = format!("{}; upstream <= lessor at n=16 in {wins}/{SEEDS} seeds", table.join(", "));
        if wins >= REQUIRED {
            Ok(detail)
        } else {
            Err(detail)
        }
    })();
    report(4, "strategy-trend-fanout", result);
}

#[test]
fn c05_strategy_trend_skew() {
    let result = (|| {
        let mut wins = 0;
        let mut lessor = Vec::new();
        let mut upstream = Vec::new();
        for seed in 0..SEEDS {
            let p50 = |strategy: &str| -> Result<u64, String> {
                let mut f = scenario_file("skew.toml");
                f.seed = seed;
                f.strategy.name = strategy.into();
                assert!(f.jobs[0].sources[0].workload.zipf_s.unwrap() >= 1.2);
                Ok(run(f)?.0.jobs[0].p50_ns)
            };
            let (l, u) = (p50("slo_lessor")?, p50("slo_upstream")?);
            wins += (l < u) as usize;
            lessor.push(l);
            upstream.push(u);
        }
        let (ml, mu) = (median(&mut lessor), median(&mut upstream));
        let detail = format!(
            "median p50 slo_lessor {}us vs slo_upstream {}us ({:.1}x); lessor lower in {wins}/{SEEDS} seeds",
            ml / 1000,
            mu / 1000,
            mu as f64 / ml as f64
        );
        if wins >= REQUIRED {
            Ok(detail)
        } else {
            Err(detail)
        }
    })();
    report(5, "strategy-trend-skew", result);
}

/// Satisfaction pooled over both jobs' outputs.
fn pooled_satisfaction(r: &MetricsReport) -> f64 {
    let n: u64 = r.jobs.iter().map(|j| j.outputs).sum();
    r.jobs.iter().map(|j| j.satisfaction_rate * j.outputs as f64).sum::<f64>() / n.max(1) as f64
}

#[test]
fn c06_slo_satisfaction_trend() {
    let result = (|| {
        let alphas = [5.0, 3.3, 2.5];
        let mut good = 0;
        let mut sums = [0.0; 3];
        for seed in 0..SEEDS {
            let mut gains = Vec::new();
            for (i, alpha) in alphas.into_iter().enumerate() {
                let sat = |strategy: &str| -> Result<f64, String> {
                    let mut f = scenario_file("two_job_pareto.toml");
                    f.seed = seed;
                    f.strategy.name = strategy.into();
                    for j in &mut f.jobs {
                        j.sources[0].workload.alpha = Some(alpha);
                    }
                    Ok(pooled_satisfaction(&run(f)?.0))
                };
                let gain = sat("slo_lessor")? - sat("fifo")?;
                sums[i] += gain;
                gains.push(gain);
            }
            if gains.iter().all(|&g| g >= 0.0) && gains.windows(2).all(|w| w[0] <= w[1]) {
                good += 1;
            }
        }
        let mean: Vec<String> =
            alphas.iter().zip(sums).map(|(a, s)| format!("alpha={a} +{:.1}%", 100.0 * s / SEEDS as f64)).collect();
        let detail = format!("mean gain over fifo {}; trend holds in {good}/{SEEDS} seeds", mean.join(", "));
        if good >= REQUIRED {
            Ok(detail)
        } else {
            Err(detail)
        }
    })();
    report(6, "slo-satisfaction-trend", result);
}

fn non_decreasing(xs: &[u64]) -> bool {
    xs.windows(2).all(|w| w[0] <= w[1])
}

#[test]
fn c07_overhead_vs_lessees() {
    let result = (|| {
        let net = NetworkModel { base_ns: MS, jitter_ns: 0, ns_per_byte: 0.0, local_ns: 0 };
        let counts = [2u32, 4, 8, 16, 32, 64];
        let mut d = Vec::new();
        for n in counts {
            d.push(sim::measure_overhead(n, 1024, net, 50_000, 7).map_err(|e| e.to_string())?);
        }
        let row: Vec<String> = counts.iter().zip(&d).map(|(n, x)| format!("{n}:{}us", x / 1000)).collect();
        let detail =
            format!("sync duration {} (16->64 +{:.0}%)", row.join(" "), 100.0 * (d[5] as f64 / d[3] as f64 - 1.0));
        if non_decreasing(&d) && d[5] > d[3] {
            Ok(detail)
        } else {
            Err(detail)
        }
    })();
    report(7, "overhead-vs-lessees", result);
}

#[test]
fn c08_overhead_vs_state_size() {
    let result = (|| {
        let net = NetworkModel { base_ns: MS, jitter_ns: 0, ns_per_byte: 1.0, local_ns: 0 };
        let sizes = [(1u64 << 10, "1KB"), (64 << 10, "64KB"), (512 << 10, "512KB"), (4 << 20, "4MB")];
        let mut d = Vec::new();
        for (bytes, _) in sizes {
            d.push(sim::measure_overhead(4, bytes, net, 50_000, 7).map_err(|e| e.to_string())?);
        }
        let row: Vec<String> = sizes.iter().zip(&d).map(|((_, l), x)| format!("{l}:{}us", x / 1000)).collect();
        let detail = format!("sync duration {}", row.join(" "));
        if non_decreasing(&d) && d[2] > d[1] && d[3] > d[1] {
            Ok(detail)
        } else {
            Err(detail)
        }
    })();
    report(8, "overhead-vs-state-size", result);
}

#[test]
fn c09_token_rate_control() {
    let result = (|| {
        let f = scenario_file("token_rate.toml");
        let share = f.jobs[0].tokens.ok_or("heavy job has no token share")?;
        if f.jobs[1].tokens != Some(share) {
            return Err("token shares differ".into());
        }
        let interval = f.strategy.token_interval_ms * MS;
        let backlogged = f.duration_ms * MS / interval;
        let (r, _) = run(f)?;
        let (heavy, light) = (r.job("heavy").ok_or("no heavy job")?, r.job("light").ok_or("no light job")?);
        let count = |j: &sim::JobMetrics, k: u64| j.executed_per_interval.get(&k).copied().unwrap_or(0);
        for k in 0..backlogged {
            let (h, l) = (count(heavy, k), count(light, k));
            if h.abs_diff(l) > 1 {
                return Err(format!("interval {k}: heavy executed {h}, light {l}"));
            }
        }
        if heavy.executed != heavy.generated {
            return Err(format!("heavy executed {} of {} messages", heavy.executed, heavy.generated));
        }
        let detail = format!(
            "{backlogged} backlogged intervals at {share}+/-1 each; heavy p99 {}ms > light p99 {}ms",
            heavy.p99_ns / MS,
            light.p99_ns / MS
        );
        if heavy.p99_ns > light.p99_ns {
            Ok(detail)
        } else {
            Err(detail)
        }
    })();
    report(9, "token-rate-control", result);
}

#[test]
fn c10_determinism_and_trace_invariants() {
    let result = (|| {
        let mut events = 0;
        let mut names = Vec::new();
        let mut dir: Vec<PathBuf> = std::fs::read_dir(root().join("scenarios"))
            .map_err(|e| e.to_string())?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        dir.sort();
        for path in &dir {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let (r1, t1) = run(scenario_file(&name))?;
            let (r2, t2) = run(scenario_file(&name))?;
            if r1.trace_hash != r2.trace_hash || render_tsv(&t1) != render_tsv(&t2) {
                return Err(format!("{name}: traces differ between identical runs"));
            }
            names.push(name);
            events += t1.len() + t2.len();
        }
        for seed in 0..50 {
            let (_, trace) = sim::run_scenario(aggregation_run(seed).spec).map_err(|e| e.to_string())?;
            audit_all(&trace, false).map_err(|e| format!("aggregation seed {seed}: {e}"))?;
            events += trace.len();
        }
        Ok(format!("byte-identical reruns of {}; {events} trace events audited", names.join(", ")))
    })();
    report(10, "determinism-and-trace-invariants", result);
}
