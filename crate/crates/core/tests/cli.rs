use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dmactor"))
}

fn manifest(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_minimal_writes_metrics() {
    let out = tempfile::tempdir().unwrap();
    let o = bin().arg("run").arg(manifest("scenarios/minimal.toml")).arg("--out").arg(out.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("job,metric,value"));
    assert!(lines.any(|l| l == "j,outputs,10"), "{csv}");
    assert!(out.path().join("summary.json").exists());
    assert!(!out.path().join("trace.tsv").exists());
}

#[test]
fn run_with_trace_flag_writes_trace() {
    let out = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("run")
        .arg(manifest("scenarios/minimal.toml"))
        .arg("--trace")
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let tsv = std::fs::read_to_string(out.path().join("trace.tsv")).unwrap();
    assert!(tsv.lines().count() > 10);
}

#[test]
fn run_rejects_out_of_range_worker() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(manifest("scenarios/minimal.toml"))
        .unwrap()
        .replace("workers = 2", "workers = 4")
        .replace("worker = 1", "worker = 99");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let o = bin().arg("run").arg(&path).arg("--out").arg(dir.path().join("out")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("jobs[0].functions[0].worker"), "{err}");
    assert!(err.contains("99"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn run_two_job_summary_matches_golden() {
    let out = tempfile::tempdir().unwrap();
    let o =
        bin().arg("run").arg(manifest("scenarios/two_job_pareto.toml")).arg("--out").arg(out.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let got: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("summary.json")).unwrap()).unwrap();
    let want: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(manifest("tests/golden/two_job_pareto.summary.json")).unwrap())
            .unwrap();
    let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&got), keys(&want));
    for (g, w) in got["jobs"].as_array().unwrap().iter().zip(want["jobs"].as_array().unwrap()) {
        assert_eq!(keys(g), keys(w));
        assert!(g["satisfaction_rate"].is_f64());
    }
    assert_eq!(got, want);
}

#[test]
fn run_seed_override_changes_hash() {
    let run = |seed: &str| {
        let out = tempfile::tempdir().unwrap();
        let o = bin()
            .arg("run")
            .arg(manifest("scenarios/two_job_pareto.toml"))
            .args(["--seed", seed, "--out"])
            .arg(out.path())
            .output()
            .unwrap();
        stdout(&o).lines().find(|l| l.starts_with("trace_hash=")).unwrap().to_string()
    };
    assert_eq!(run("5"), run("5"));
    assert_ne!(run("5"), run("6"));
}

#[test]
fn check_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().arg("check").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 topologies"), "{}", stdout(&o));
}

#[test]
fn check_corpus_passes() {
    let o = bin().arg("check").arg(manifest("corpus")).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("counterexample"));
}

#[test]
fn check_mutant_writes_counterexample() {
    let out = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("check")
        .arg(manifest("corpus"))
        .args(["--mutant", "register-while-blocked", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));
    let files: Vec<_> = std::fs::read_dir(out.path()).unwrap().map(|e| e.unwrap().path()).collect();
    let json = files.iter().find(|p| p.extension().is_some_and(|e| e == "json")).expect("counterexample json");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert!(v.is_object());
}

#[test]
fn check_unknown_mutant_is_rejected() {
    let o = bin().arg("check").arg(manifest("corpus")).args(["--mutant", "nope"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown mutant"));
}

#[test]
fn compare_identical_has_zero_diff() {
    let p = manifest("scenarios/minimal.toml");
    let o = bin().arg("compare").arg(&p).arg(&p).args(["--metric", "p50_ns"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("varied=none"), "{text}");
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("j\t")).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.ends_with("\t0")), "{text}");
}

#[test]
fn compare_strategy_variants() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(manifest("scenarios/two_job_pareto.toml")).unwrap();
    let fifo = dir.path().join("fifo.toml");
    std::fs::write(&fifo, base.replace("name = \"slo_lessor\"", "name = \"fifo\"")).unwrap();
    let o = bin()
        .arg("compare")
        .arg(manifest("scenarios/two_job_pareto.toml"))
        .arg(&fifo)
        .args(["--metric", "satisfaction_rate"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("varied=strategy.name"), "{}", stdout(&o));
}

#[test]
fn compare_rejects_non_comparable() {
    let o = bin()
        .arg("compare")
        .arg(manifest("scenarios/minimal.toml"))
        .arg(manifest("scenarios/token_rate.toml"))
        .args(["--metric", "p50_ns"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("comparable"), "{}", stderr(&o));
}
