//! Scenario files: a TOML description of workers, jobs, strategy, workload
//! and transport that builds a [`SimSpec`].
//!
//! ```toml
//! workers = 4
//! seed = 7
//! duration_ms = 2000
//!
//! [strategy]
//! name = "slo_lessor"
//! fanout = 3
//!
//! [transport]
//! base_us = 1000
//!
//! [[jobs]]
//! name = "agg"
//! latency_target_ms = 40
//! edges = [["map", "sum"]]
//!
//! [[jobs.functions]]
//! name = "map"
//! operator = "map"
//! worker = 1
//!
//! [[jobs.functions]]
//! name = "sum"
//! operator = "window_sum"
//! worker = 2
//! lessees = 2
//!
//! [[jobs.sources]]
//! name = "src"
//! worker = 0
//! targets = ["map"]
//! workload = { generator = "pareto_burst", alpha = 2.5, rate = 400, critical = "watermark", critical_every_ms = 100 }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::model::{CriticalKind, FunctionAddress, JobId, SimTime, WorkerId};
use crate::operators::{Operator, OperatorKind};
use crate::protocol::Mutant;
use crate::runtime::{DataflowJob, FunctionSpec, SourceSpec};
use crate::scheduling::StrategyKind;
use crate::sim::{self, Arrivals, CriticalPlan, KeyDist, ServiceModel, SimSpec, Workload, MS};

const US: SimTime = 1_000;

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub workers: u32,
    #[serde(default)]
    pub seed: u64,
    pub duration_ms: u64,
    /// Time allowed after the last injection for in-flight work.
    #[serde(default = "default_drain_ms")]
    pub drain_ms: u64,
    #[serde(default)]
    pub read_heavy: bool,
    #[serde(default)]
    pub verbose_trace: bool,
    #[serde(default)]
    pub mutants: Vec<String>,
    #[serde(default)]
    pub strategy: StrategySection,
    #[serde(default)]
    pub transport: TransportSection,
    #[serde(default)]
    pub service: ServiceSection,
    pub jobs: Vec<JobSection>,
}

fn default_drain_ms() -> u64 {
    60_000
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    #[serde(default = "default_strategy")]
    pub name: String,
    #[serde(default)]
    pub fanout: u32,
    #[serde(default = "default_pause_ms")]
    pub pause_ms: u64,
    #[serde(default = "default_interval_ms")]
    pub token_interval_ms: u64,
}

fn default_strategy() -> String {
    "default".into()
}
fn default_pause_ms() -> u64 {
    crate::scheduling::DEFAULT_PAUSE_NS / MS
}
fn default_interval_ms() -> u64 {
    crate::scheduling::DEFAULT_TOKEN_INTERVAL_NS / MS
}

impl Default for StrategySection {
    fn default() -> Self {
        Self {
            name: default_strategy(),
            fanout: 0,
            pause_ms: default_pause_ms(),
            token_interval_ms: default_interval_ms(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TransportSection {
    #[serde(default = "default_base_us")]
    pub base_us: u64,
    #[serde(default)]
    pub jitter_us: u64,
    #[serde(default)]
    pub ns_per_byte: f64,
    #[serde(default)]
    pub local_us: u64,
    /// Fetcher cost per delivered message.
    #[serde(default)]
    pub fetch_us: u64,
}

fn default_base_us() -> u64 {
    1_000
}

impl Default for TransportSection {
    fn default() -> Self {
        Self { base_us: default_base_us(), jitter_us: 0, ns_per_byte: 0.0, local_us: 0, fetch_us: 0 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ServiceSection {
    #[serde(default = "default_service_us")]
    pub data_us: u64,
    #[serde(default)]
    pub jitter_us: u64,
    #[serde(default = "default_service_us")]
    pub critical_us: u64,
}

fn default_service_us() -> u64 {
    1_000
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self { data_us: default_service_us(), jitter_us: 0, critical_us: default_service_us() }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct JobSection {
    pub name: String,
    pub latency_target_ms: Option<f64>,
    /// Derive the target as twice the job's solo p99.
    #[serde(default)]
    pub calibrate_slo: bool,
    pub tokens: Option<u32>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    pub functions: Vec<FunctionSection>,
    pub sources: Vec<SourceSection>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FunctionSection {
    pub name: String,
    pub operator: String,
    pub worker: u32,
    #[serde(default)]
    pub lessees: u32,
    pub factor: Option<i64>,
    pub threshold: Option<i64>,
    pub partitions: Option<u32>,
    pub service_us: Option<u64>,
    pub jitter_us: Option<u64>,
    pub critical_us: Option<u64>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub name: String,
    pub worker: u32,
    pub targets: Vec<String>,
    #[serde(default)]
    pub route_by_key: bool,
    #[serde(default)]
    pub workload: WorkloadSection,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    #[serde(default = "default_generator")]
    pub generator: String,
    #[serde(default)]
    pub rate: f64,
    pub alpha: Option<f64>,
    #[serde(default = "default_keys")]
    pub keys: u64,
    pub zipf_s: Option<f64>,
    pub file: Option<PathBuf>,
    #[serde(default = "default_values")]
    pub values: (i64, i64),
    pub critical: Option<String>,
    pub critical_every_ms: Option<u64>,
}

fn default_generator() -> String {
    "none".into()
}
fn default_keys() -> u64 {
    1
}
fn default_values() -> (i64, i64) {
    (1, 100)
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            generator: default_generator(),
            rate: 0.0,
            alpha: None,
            keys: default_keys(),
            zipf_s: None,
            file: None,
            values: default_values(),
            critical: None,
            critical_every_ms: None,
        }
    }
}

/// Every problem found, each prefixed with the offending field.
#[derive(Debug, thiserror::Error)]
#[error("{}", .0.join("\n"))]
pub struct ValidationErrors(pub Vec<String>);

/// A validated scenario ready to simulate.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub spec: SimSpec,
    /// Jobs whose target is derived by calibration.
    pub calibrate: Vec<JobId>,
}

pub fn parse_str(text: &str, origin: &str) -> Result<ScenarioFile, ValidationErrors> {
    toml::from_str(text).map_err(|e| {
        let at = match e.span() {
            Some(s) => {
                let line = text[..s.start].matches('\n').count() + 1;
                format!("{origin}:{line}")
            }
            None => origin.to_string(),
        };
        ValidationErrors(vec![format!("{at}: {}", e.message())])
    })
}

pub fn load(path: &Path) -> Result<Scenario, ValidationErrors> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| ValidationErrors(vec![format!("{origin}: {e}")]))?;
    let file = parse_str(&text, &origin)?;
    build(file, path.parent())
        .map_err(|ValidationErrors(v)| ValidationErrors(v.into_iter().map(|m| format!("{origin}: {m}")).collect()))
}

fn critical_kind(s: &str) -> Option<CriticalKind> {
    Some(match s {
        "watermark" => CriticalKind::Watermark,
        "snapshot" => CriticalKind::Snapshot,
        "read" => CriticalKind::Read,
        _ => return None,
    })
}

/// Validates and lowers a parsed file. `base` resolves replay paths.
pub fn build(file: ScenarioFile, base: Option<&Path>) -> Result<Scenario, ValidationErrors> {
    let mut errs = Vec::new();
    let w = file.workers;
    if w == 0 {
        errs.push("workers: must be at least 1".to_string());
    }
    if file.duration_ms == 0 {
        errs.push("duration_ms: must be positive".to_string());
    }
    let strategy = StrategyKind::parse(&file.strategy.name);
    if strategy.is_none() {
        let names: Vec<&str> = StrategyKind::ALL.iter().map(|k| k.name()).collect();
        errs.push(format!(
            "strategy.name: unknown strategy {:?} (expected one of {})",
            file.strategy.name,
            names.join(", ")
        ));
    }
    let mut protocol = crate::protocol::ProtocolConfig { read_heavy: file.read_heavy, ..Default::default() };
    for (i, m) in file.mutants.iter().enumerate() {
        match Mutant::parse(m) {
            Some(m) => m.enable(&mut protocol.mutants),
            None => errs.push(format!("mutants[{i}]: unknown mutant {m:?}")),
        }
    }
    if file.transport.ns_per_byte < 0.0 {
        errs.push("transport.ns_per_byte: must be non-negative".to_string());
    }

    let mut jobs = Vec::new();
    let mut job_names = BTreeMap::new();
    let mut service = BTreeMap::new();
    let mut leases = Vec::new();
    let mut workloads = Vec::new();
    let mut calibrate = Vec::new();
    let mut params = crate::scheduling::StrategyParams {
        fanout: file.strategy.fanout,
        pause_ns: file.strategy.pause_ms * MS,
        token_interval_ns: file.strategy.token_interval_ms * MS,
        ..Default::default()
    };
    let mut seen_jobs = BTreeSet::new();
    for (ji, job) in file.jobs.iter().enumerate() {
        let p = format!("jobs[{ji}]");
        let id = JobId(ji as u32);
        if !seen_jobs.insert(job.name.as_str()) {
            errs.push(format!("{p}.name: duplicate job name {:?}", job.name));
        }
        job_names.insert(id, job.name.clone());
        match (job.latency_target_ms, job.calibrate_slo) {
            (Some(_), true) => errs.push(format!("{p}.latency_target_ms: conflicts with calibrate_slo")),
            (Some(t), false) if t.is_nan() || t <= 0.0 => errs.push(format!("{p}.latency_target_ms: must be positive")),
            (Some(t), false) => {
                params.latency_targets.insert(id, (t * MS as f64) as SimTime);
            }
            (None, true) => calibrate.push(id),
            (None, false) => {}
        }
        if let Some(t) = job.tokens {
            params.tokens.insert(id, t);
        }
        let mut ids = BTreeMap::new();
        let mut functions = Vec::new();
        for (fi, f) in job.functions.iter().enumerate() {
            let fp = format!("{p}.functions[{fi}]");
            if ids.insert(f.name.clone(), fi as u32).is_some() {
                errs.push(format!("{fp}.name: duplicate name {:?}", f.name));
            }
            if f.worker >= w {
                errs.push(format!("{fp}.worker: placed on worker {} of {w}", f.worker));
            }
            let Some(kind) = OperatorKind::parse(&f.operator) else {
                errs.push(format!("{fp}.operator: unknown operator {:?}", f.operator));
                continue;
            };
            let mut op = Operator::new(kind);
            op.factor = f.factor.unwrap_or(op.factor);
            op.threshold = f.threshold.unwrap_or(op.threshold);
            op.partitions = f.partitions.unwrap_or(op.partitions);
            if op.partitions == 0 {
                errs.push(format!("{fp}.partitions: must be at least 1"));
            }
            let fa = FunctionAddress::new(id.0, fi as u32);
            let d = &file.service;
            service.insert(
                fa,
                ServiceModel {
                    data_ns: f.service_us.unwrap_or(d.data_us) * US,
                    jitter_ns: f.jitter_us.unwrap_or(d.jitter_us) * US,
                    critical_ns: f.critical_us.unwrap_or(d.critical_us) * US,
                },
            );
            leases.extend((1..=f.lessees).map(|i| (fa, i)));
            functions.push(FunctionSpec {
                id: fi as u32,
                name: f.name.clone(),
                operator: op,
                worker: WorkerId(f.worker),
            });
        }
        let mut edges = Vec::new();
        for (ei, (a, b)) in job.edges.iter().enumerate() {
            match (ids.get(a), ids.get(b)) {
                (Some(&x), Some(&y)) => edges.push((x, y)),
                _ => errs.push(format!("{p}.edges[{ei}]: unknown function in {a:?} -> {b:?}")),
            }
        }
        let mut sources = Vec::new();
        for (si, s) in job.sources.iter().enumerate() {
            let sp = format!("{p}.sources[{si}]");
            let sid = (job.functions.len() + si) as u32;
            if s.worker >= w {
                errs.push(format!("{sp}.worker: placed on worker {} of {w}", s.worker));
            }
            if ids.contains_key(&s.name) || job.sources[..si].iter().any(|o| o.name == s.name) {
                errs.push(format!("{sp}.name: duplicate name {:?}", s.name));
            }
            let mut targets = Vec::new();
            for (ti, t) in s.targets.iter().enumerate() {
                match ids.get(t) {
                    Some(&x) => targets.push(x),
                    None => errs.push(format!("{sp}.targets[{ti}]: unknown function {t:?}")),
                }
            }
            sources.push(SourceSpec {
                id: sid,
                name: s.name.clone(),
                worker: WorkerId(s.worker),
                targets,
                route_by_key: s.route_by_key,
            });
            match lower_workload(&s.workload, FunctionAddress::new(id.0, sid), base) {
                Ok(wl) => workloads.push(wl),
                Err(v) => errs.extend(v.into_iter().map(|m| format!("{sp}.workload.{m}"))),
            }
        }
        let dj = DataflowJob { id, functions, edges, sources };
        if let Err(e) = dj.topo_order() {
            errs.push(format!("{p}.edges: {e}"));
        }
        jobs.push(dj);
    }
    if file.jobs.is_empty() {
        errs.push("jobs: at least one job is required".to_string());
    }
    if !errs.is_empty() {
        return Err(ValidationErrors(errs));
    }
    let mut spec = SimSpec::new(w, jobs);
    spec.job_names = job_names;
    spec.strategy = strategy.expect("validated");
    spec.params = params;
    spec.protocol = protocol;
    spec.workloads = workloads;
    spec.net = sim::NetworkModel {
        base_ns: file.transport.base_us * US,
        jitter_ns: file.transport.jitter_us * US,
        ns_per_byte: file.transport.ns_per_byte,
        local_ns: file.transport.local_us * US,
    };
    spec.fetch_ns = file.transport.fetch_us * US;
    spec.service = service;
    spec.default_service = ServiceModel {
        data_ns: file.service.data_us * US,
        jitter_ns: file.service.jitter_us * US,
        critical_ns: file.service.critical_us * US,
    };
    spec.leases = leases;
    spec.seed = file.seed;
    spec.duration_ns = file.duration_ms * MS;
    spec.drain_ns = file.drain_ms * MS;
    Ok(Scenario { file, spec, calibrate })
}

fn lower_workload(w: &WorkloadSection, source: FunctionAddress, base: Option<&Path>) -> Result<Workload, Vec<String>> {
    let mut errs = Vec::new();
    let arrivals = match w.generator.as_str() {
        "none" => Arrivals::None,
        "constant_rate" => Arrivals::Constant { rate: w.rate },
        "pareto_burst" => match w.alpha {
            Some(a) if a > 1.0 => Arrivals::Pareto { alpha: a, rate: w.rate },
            Some(a) => {
                errs.push(format!("alpha: must exceed 1, got {a}"));
                Arrivals::None
            }
            None => {
                errs.push("alpha: required by pareto_burst".into());
                Arrivals::None
            }
        },
        "trace_replay" => match &w.file {
            Some(f) => {
                let path = base.map_or(f.clone(), |b| b.join(f));
                match std::fs::read_to_string(&path).map_err(|e| e.to_string()).and_then(|t| sim::parse_replay(&t)) {
                    Ok(rows) => Arrivals::Replay(rows),
                    Err(e) => {
                        errs.push(format!("file: {}: {e}", path.display()));
                        Arrivals::None
                    }
                }
            }
            None => {
                errs.push("file: required by trace_replay".into());
                Arrivals::None
            }
        },
        g => {
            errs.push(format!("generator: unknown generator {g:?}"));
            Arrivals::None
        }
    };
    if w.rate < 0.0 {
        errs.push("rate: must be non-negative".into());
    }
    let keys = match w.zipf_s {
        Some(s) if s < 0.0 => {
            errs.push(format!("zipf_s: must be non-negative, got {s}"));
            KeyDist::Uniform { n: w.keys }
        }
        Some(s) => KeyDist::Zipf { n: w.keys, s },
        None => KeyDist::Uniform { n: w.keys },
    };
    if w.keys == 0 {
        errs.push("keys: must be at least 1".into());
    }
    if w.values.0 > w.values.1 {
        errs.push("values: lower bound exceeds upper bound".into());
    }
    let criticals = match (&w.critical, w.critical_every_ms) {
        (Some(k), Some(every)) => match critical_kind(k) {
            Some(kind) if every > 0 => Some(CriticalPlan { kind, every_ns: every * MS }),
            Some(_) => {
                errs.push("critical_every_ms: must be positive".into());
                None
            }
            None => {
                errs.push(format!("critical: unknown critical kind {k:?}"));
                None
            }
        },
        (None, None) => None,
        _ => {
            errs.push("critical: critical and critical_every_ms go together".into());
            None
        }
    };
    if errs.is_empty() {
        Ok(Workload { source, arrivals, keys, values: w.values, criticals })
    } else {
        Err(errs)
    }
}

impl Scenario {
    /// Fills calibrated latency targets, then runs.
    pub fn run(mut self) -> Result<(sim::MetricsReport, Vec<crate::trace::TraceEvent>), sim::SimError> {
        for &job in &self.calibrate {
            let t = sim::calibrate_latency_target(&self.spec, job)?;
            self.spec.params.latency_targets.insert(job, t);
        }
        sim::run_scenario(self.spec)
    }
}

/// Dimensions two compared scenarios may differ in.
pub const COMPARE_DIMENSIONS: [&str; 4] = ["strategy.name", "seed", "alpha", "lessees"];

/// Errors unless `a` and `b` differ only in [`COMPARE_DIMENSIONS`].
pub fn check_comparable(a: &ScenarioFile, b: &ScenarioFile) -> Result<Vec<String>, String> {
    let strip = |f: &ScenarioFile| {
        let mut f = f.clone();
        f.strategy.name.clear();
        f.seed = 0;
        for j in &mut f.jobs {
            j.functions.iter_mut().for_each(|x| x.lessees = 0);
            j.sources.iter_mut().for_each(|s| s.workload.alpha = None);
        }
        f
    };
    if strip(a) != strip(b) {
        return Err(format!("scenarios differ outside the comparable dimensions ({})", COMPARE_DIMENSIONS.join(", ")));
    }
    let mut differ = Vec::new();
    if a.strategy.name != b.strategy.name {
        differ.push("strategy.name".to_string());
    }
    if a.seed != b.seed {
        differ.push("seed".to_string());
    }
    let alphas =
        |f: &ScenarioFile| f.jobs.iter().flat_map(|j| j.sources.iter().map(|s| s.workload.alpha)).collect::<Vec<_>>();
    if alphas(a) != alphas(b) {
        differ.push("alpha".to_string());
    }
    let lessees =
        |f: &ScenarioFile| f.jobs.iter().flat_map(|j| j.functions.iter().map(|x| x.lessees)).collect::<Vec<_>>();
    if lessees(a) != lessees(b) {
        differ.push("lessees".to_string());
    }
    Ok(differ)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
workers = 2
duration_ms = 100

[[jobs]]
name = "j"

[[jobs.functions]]
name = "m"
operator = "map"
worker = 1

[[jobs.sources]]
name = "s"
worker = 0
targets = ["m"]
workload = { generator = "constant_rate", rate = 100 }
"#;

    #[test]
    fn minimal_builds_and_runs() {
        let f = parse_str(MINIMAL, "t.toml").unwrap();
        let s = build(f, None).unwrap();
        let (r, _) = s.run().unwrap();
        assert_eq!(r.jobs[0].executed, 10);
    }

    #[test]
    fn worker_out_of_range_names_field() {
        let text = MINIMAL.replace("worker = 1", "worker = 99").replace("workers = 2", "workers = 4");
        let err = build(parse_str(&text, "t.toml").unwrap(), None).unwrap_err();
        assert_eq!(err.0, vec!["jobs[0].functions[0].worker: placed on worker 99 of 4"]);
    }

    #[test]
    fn every_error_is_listed() {
        let text = MINIMAL
            .replace("operator = \"map\"", "operator = \"join\"")
            .replace("targets = [\"m\"]", "targets = [\"x\"]")
            .replace("rate = 100", "rate = 100, alpha = 0.5, generator2 = 1");
        let err = parse_str(&text, "t.toml").unwrap_err();
        assert!(err.0[0].starts_with("t.toml:"), "{err}");
        let text = MINIMAL
            .replace("operator = \"map\"", "operator = \"join\"")
            .replace("targets = [\"m\"]", "targets = [\"x\"]");
        let err = build(parse_str(&text, "t.toml").unwrap(), None).unwrap_err();
        assert_eq!(err.0.len(), 2, "{err}");
        assert!(err.0[0].contains("operator") && err.0[1].contains("targets[0]"));
    }

    #[test]
    fn pareto_alpha_must_exceed_one() {
        let text = MINIMAL.replace("generator = \"constant_rate\"", "generator = \"pareto_burst\", alpha = 1.0");
        let err = build(parse_str(&text, "t").unwrap(), None).unwrap_err();
        assert!(err.0[0].contains("workload.alpha"), "{err}");
    }

    #[test]
    fn comparability() {
        let a = parse_str(MINIMAL, "a").unwrap();
        let mut b = a.clone();
        assert_eq!(check_comparable(&a, &b).unwrap(), Vec::<String>::new());
        b.strategy.name = "token".into();
        b.jobs[0].functions[0].lessees = 3;
        assert_eq!(check_comparable(&a, &b).unwrap(), vec!["strategy.name", "lessees"]);
        b.workers = 3;
        assert!(check_comparable(&a, &b).is_err());
    }
}
