use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmactor::checker::{self, DEFAULT_CAP};
use dmactor::protocol::Mutant;
use dmactor::scenario::{self, Scenario};
use dmactor::sim::{MetricsReport, SimError};
use dmactor::trace::render_tsv;

const EXIT_VALIDATION: u8 = 1;
const EXIT_PROTOCOL: u8 = 2;
const EXIT_COUNTEREXAMPLE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "dmactor",
    version,
    about = "Dual-mode actor stream runtime: simulate scenarios and check barrier safety"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scenario and write metrics.csv, summary.json and optionally trace.tsv.
    Run {
        scenario: PathBuf,
        #[arg(long, env = "DMACTOR_OUT", default_value = "out")]
        out: PathBuf,
        /// Write the full protocol trace.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Exhaustively check every topology file in a corpus directory.
    Check {
        corpus: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: u64,
        /// Enable a protocol mutant in every topology (repeatable).
        #[arg(long = "mutant")]
        mutants: Vec<String>,
        /// Where counterexamples are written.
        #[arg(long, env = "DMACTOR_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Run comparable scenarios and tabulate one metric per job.
    Compare {
        #[arg(num_args = 2.., required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long)]
        metric: String,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Run { scenario, out, trace, seed } => cmd_run(&scenario, &out, trace, seed),
        Cmd::Check { corpus, cap, mutants, out } => cmd_check(&corpus, cap, &mutants, &out),
        Cmd::Compare { scenarios, metric } => cmd_compare(&scenarios, &metric),
    };
    ExitCode::from(code)
}

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario, u8> {
    let mut s = scenario::load(path).map_err(|e| {
        eprintln!("{e}");
        EXIT_VALIDATION
    })?;
    if let Some(seed) = seed {
        s.spec.seed = seed;
        s.file.seed = seed;
    }
    Ok(s)
}

fn simulate(s: Scenario) -> Result<(MetricsReport, Vec<dmactor::trace::TraceEvent>), u8> {
    s.run().map_err(|e| match e {
        SimError::Invalid(m) => {
            eprintln!("invalid scenario: {m}");
            EXIT_VALIDATION
        }
        SimError::Protocol { error, tail } => {
            eprintln!("protocol violation: {error}\ntrace tail:\n{tail}");
            EXIT_PROTOCOL
        }
    })
}

fn write(path: &Path, body: &str) -> Result<(), u8> {
    std::fs::write(path, body).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        EXIT_VALIDATION
    })
}

fn cmd_run(path: &Path, out: &Path, trace: bool, seed: Option<u64>) -> u8 {
    let run = || -> Result<(), u8> {
        let s = load(path, seed)?;
        let verbose = s.file.verbose_trace;
        tracing::info!(scenario = %path.display(), seed = s.spec.seed, "running");
        let (report, events) = simulate(s)?;
        std::fs::create_dir_all(out).map_err(|e| {
            eprintln!("{}: {e}", out.display());
            EXIT_VALIDATION
        })?;
        write(&out.join("metrics.csv"), &report.to_csv())?;
        let summary = serde_json::to_string_pretty(&report.summary_json()).expect("serializable");
        write(&out.join("summary.json"), &(summary + "\n"))?;
        if trace || verbose {
            write(&out.join("trace.tsv"), &render_tsv(&events))?;
        }
        for j in &report.jobs {
            println!(
                "{}\toutputs={}\tp50_ns={}\tp99_ns={}\tsatisfaction={:.4}",
                j.job, j.outputs, j.p50_ns, j.p99_ns, j.satisfaction_rate
            );
        }
        println!("trace_hash={}", report.trace_hash);
        Ok(())
    };
    match run() {
        Ok(()) => 0,
        Err(c) => c,
    }
}

fn cmd_check(dir: &Path, cap: u64, mutant_names: &[String], out: &Path) -> u8 {
    let mut mutants = Vec::new();
    for m in mutant_names {
        match Mutant::parse(m) {
            Some(x) => mutants.push(x),
            None => {
                let names: Vec<&str> = Mutant::ALL.iter().map(|m| m.name()).collect();
                eprintln!("--mutant: unknown mutant {m:?} (expected one of {})", names.join(", "));
                return EXIT_VALIDATION;
            }
        }
    }
    let corpus = match checker::load_corpus(dir) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_VALIDATION;
        }
    };
    if corpus.is_empty() {
        println!("0 topologies in {}", dir.display());
        return 0;
    }
    let mut total = 0u64;
    let mut code = 0;
    for (report, cx) in checker::check_corpus(&corpus, cap, &mutants) {
        total += report.interleavings;
        println!(
            "{}\t{}\t{} interleavings{}",
            report.name,
            report.verdict,
            report.interleavings,
            report.detail.as_ref().map_or(String::new(), |d| format!("\t{d}"))
        );
        match report.verdict {
            "pass" => {}
            "counterexample" => {
                code = EXIT_COUNTEREXAMPLE;
                if let Some(cx) = cx {
                    if std::fs::create_dir_all(out).is_ok() {
                        let base = out.join(format!("counterexample-{}", report.name));
                        let json = serde_json::to_string_pretty(&*cx).expect("serializable");
                        let _ = std::fs::write(base.with_extension("json"), json + "\n");
                        let _ = std::fs::write(base.with_extension("tsv"), cx.trace_tsv());
                        println!("\tcounterexample written to {}", base.with_extension("json").display());
                    }
                }
            }
            _ if code == 0 => code = EXIT_VALIDATION,
            _ => {}
        }
    }
    println!("{} topologies, {total} interleavings", corpus.len());
    code
}

/// One number per job from a report.
fn metric(r: &MetricsReport, job: &str, name: &str) -> Option<f64> {
    let j = r.job(job)?;
    Some(match name {
        "satisfaction_rate" => j.satisfaction_rate,
        "p50_ns" => j.p50_ns as f64,
        "p95_ns" => j.p95_ns as f64,
        "p99_ns" => j.p99_ns as f64,
        "outputs" => j.outputs as f64,
        "executed" => j.executed as f64,
        "forwarded" => j.forwarded as f64,
        "sync_ns" => {
            let mut d: Vec<u64> = r.barriers.iter().map(|b| b.sync_ns).collect();
            d.sort_unstable();
            *d.get(d.len().saturating_sub(1) / 2)? as f64
        }
        _ => return None,
    })
}

const METRICS: [&str; 8] =
    ["satisfaction_rate", "p50_ns", "p95_ns", "p99_ns", "outputs", "executed", "forwarded", "sync_ns"];

fn cmd_compare(paths: &[PathBuf], name: &str) -> u8 {
    if !METRICS.contains(&name) {
        eprintln!("--metric: unknown metric {name:?} (expected one of {})", METRICS.join(", "));
        return EXIT_VALIDATION;
    }
    let mut loaded = Vec::new();
    for p in paths {
        match load(p, None) {
            Ok(s) => loaded.push(s),
            Err(c) => return c,
        }
    }
    let mut dims = std::collections::BTreeSet::new();
    for (p, s) in paths.iter().zip(&loaded).skip(1) {
        match scenario::check_comparable(&loaded[0].file, &s.file) {
            Ok(d) => dims.extend(d),
            Err(e) => {
                eprintln!("{}: {e}", p.display());
                return EXIT_VALIDATION;
            }
        }
    }
    let jobs: Vec<String> = loaded[0].file.jobs.iter().map(|j| j.name.clone()).collect();
    let mut reports = Vec::new();
    for s in loaded {
        match simulate(s) {
            Ok((r, _)) => reports.push(r),
            Err(c) => return c,
        }
    }
    let varied = if dims.is_empty() { "none".to_string() } else { dims.into_iter().collect::<Vec<_>>().join(",") };
    println!("# metric={name} varied={varied}");
    println!("job\tscenario\t{name}\tdiff_vs_first");
    for job in &jobs {
        let base = metric(&reports[0], job, name);
        for (p, r) in paths.iter().zip(&reports) {
            let v = metric(r, job, name);
            let fmt = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{x}"));
            let diff = match (v, base) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            println!("{job}\t{}\t{}\t{}", p.display(), fmt(v), fmt(diff));
        }
    }
    0
}
