//! End-to-end runs of the `semergy` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn semergy(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semergy"))
        .current_dir(dir)
        .env_remove("SEMERGY_CACHE_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = semergy(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON object")
}

/// Runs a failing command and returns its parsed single-line stderr.
fn err(dir: &Path, args: &[&str]) -> Value {
    let out = semergy(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    serde_json::from_str(stderr.trim_end()).expect("stderr is JSON")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn auroc(report: &Value, method: &str) -> f64 {
    report["methods"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["method"] == method)
        .unwrap()["auroc"]
        .as_f64()
        .unwrap()
}

#[test]
fn mixed_benchmark_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--preset", "mixed-benchmark", "--seed", "1", "--out", "t.jsonl"]);
    ok(d, &["validate", "--traces", "t.jsonl"]);
    ok(d, &["cluster", "--traces", "t.jsonl", "--strategy", "exact", "--out", "c.jsonl"]);
    ok(d, &["score", "--traces", "t.jsonl", "--clusters", "c.jsonl", "--out", "s.jsonl"]);
    ok(d, &["eval", "--scores", "s.jsonl", "--out", "e.json"]);
    let report = read_json(&d.join("e.json"));
    assert!(auroc(&report, "semantic_energy") > auroc(&report, "semantic_entropy"));

    ok(d, &[
        "eval", "--scores", "s.jsonl", "--subset", "single-cluster",
        "--methods", "semantic_entropy", "--out", "se.json",
    ]);
    let se = read_json(&d.join("se.json"));
    assert_eq!(se["methods"].as_array().unwrap().len(), 1);
    assert_eq!(auroc(&se, "semantic_entropy"), 0.5);

    let manifest = read_json(&d.join("s.jsonl.manifest.json"));
    assert_eq!(manifest["stage"], "score");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn truncated_trace_names_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--preset", "mixed-benchmark", "--out", "t.jsonl"]);
    let text = std::fs::read_to_string(d.join("t.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().take(4).collect();
    let cut = format!("{}\n{}\n{}\n{}", lines[0], lines[1], lines[2], &lines[3][..lines[3].len() / 2]);
    std::fs::write(d.join("cut.jsonl"), cut).unwrap();

    let e = err(d, &["validate", "--traces", "cut.jsonl"]);
    assert_eq!(e["stage"], "validate");
    assert_eq!(e["line"], 4);
    assert!(e["error"].as_str().unwrap().contains("line 4"));
}

#[test]
fn validate_reports_invariant_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--preset", "mixed-benchmark", "--out", "t.jsonl"]);
    let text = std::fs::read_to_string(d.join("t.jsonl")).unwrap();
    let mut first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    first["responses"][0]["tokens"][0]["logprob"] = Value::from(0.5);
    let rest: Vec<&str> = text.lines().skip(1).collect();
    std::fs::write(d.join("bad.jsonl"), format!("{first}\n{}\n", rest.join("\n"))).unwrap();

    let e = err(d, &["validate", "--traces", "bad.jsonl", "--out", "lint.json"]);
    assert!(e["error"].as_str().unwrap().contains("violation"));
    let lint = read_json(&d.join("lint.json"));
    let kinds: Vec<&str> = lint["violations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["kind"].as_str().unwrap())
        .collect();
    assert!(kinds.contains(&"positive_logprob"));
    assert!(kinds.contains(&"inconsistent"));
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("run.toml"),
        r#"
        seed = 3
        [synth]
        seed = 0
        [[synth.regime]]
        questions = 20
        n = 4
        token_len = [3, 6]
        cluster_plan = "multi_cluster"
        logit_mean = 10.0
        logit_sd = 2.0
        correct_fraction = 0.5
        "#,
    )
    .unwrap();
    let summary = ok(d, &["synth", "--config", "run.toml", "--seed", "8", "--out", "t.jsonl"]);
    assert_eq!(summary["summary"]["questions"], 20);
    let manifest = read_json(&d.join("t.jsonl.manifest.json"));
    assert_eq!(manifest["config"]["seed"], 8);
}

#[test]
fn entailment_with_rule_table_and_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--preset", "mixed-benchmark", "--out", "t.jsonl"]);
    std::fs::write(d.join("rules.json"), r#"{"equivalent": []}"#).unwrap();
    let args = [
        "cluster", "--traces", "t.jsonl", "--strategy", "entailment",
        "--oracle-url", "file://rules.json", "--cache", "cache/j.jsonl", "--out", "c.jsonl",
    ];
    let cold = ok(d, &args);
    assert!(cold["summary"]["oracle_calls"].as_u64().unwrap() > 0);
    let first = std::fs::read(d.join("c.jsonl")).unwrap();
    let warm = ok(d, &args);
    assert_eq!(warm["summary"]["oracle_calls"], 0);
    assert_eq!(std::fs::read(d.join("c.jsonl")).unwrap(), first);

    ok(d, &["cluster", "--traces", "t.jsonl", "--strategy", "exact", "--out", "x.jsonl"]);
    let assignments = |name: &str| -> Vec<Value> {
        std::fs::read_to_string(d.join(name))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["assignments"].clone())
            .collect()
    };
    assert_eq!(assignments("x.jsonl"), assignments("c.jsonl"));
}

#[test]
fn cache_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--preset", "mixed-benchmark", "--out", "t.jsonl"]);
    std::fs::write(d.join("rules.json"), "{}").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_semergy"))
        .current_dir(d)
        .env("SEMERGY_CACHE_DIR", d.join("judgments"))
        .args(["cluster", "--traces", "t.jsonl", "--strategy", "entailment"])
        .args(["--oracle-url", "file://rules.json", "--out", "c.jsonl"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("judgments/judgments.jsonl").exists());
}

#[test]
fn report_writes_tables_and_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--preset", "mixed-benchmark", "--out", "t.jsonl"]);
    ok(d, &["cluster", "--traces", "t.jsonl", "--out", "c.jsonl"]);
    ok(d, &[
        "score", "--traces", "t.jsonl", "--clusters", "c.jsonl",
        "--methods", "semantic_entropy,semantic_energy", "--out", "s.jsonl",
    ]);
    ok(d, &["report", "--scores", "s.jsonl", "--granularity", "question", "--out", "rep"]);
    let text = std::fs::read_to_string(d.join("rep/report.txt")).unwrap();
    assert!(text.starts_with("subset=all granularity=question items=1000"));
    assert!(text.contains("semantic_energy"));
    let roc = std::fs::read_to_string(d.join("rep/curves/semantic_energy_roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr\n-inf,0.0,0.0\n"));
    assert!(roc.trim_end().ends_with(",1.0,1.0"));
    assert!(d.join("rep/curves/semantic_entropy_pr.csv").exists());
    assert!(d.join("rep/manifest.json").exists());
}

#[test]
fn stage_errors_are_single_line_json() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let e = err(d, &["score", "--traces", "missing.jsonl", "--clusters", "c.jsonl", "--out", "s.jsonl"]);
    assert!(e["error"].as_str().unwrap().contains("does not exist"));

    ok(d, &["synth", "--preset", "mixed-benchmark", "--out", "t.jsonl"]);
    let e = err(d, &["cluster", "--traces", "t.jsonl", "--strategy", "embedding", "--out", "c.jsonl"]);
    assert!(e["error"].as_str().unwrap().contains("--embed-url"));

    ok(d, &["cluster", "--traces", "t.jsonl", "--out", "c.jsonl"]);
    ok(d, &["score", "--traces", "t.jsonl", "--clusters", "c.jsonl", "--methods", "entropy_avg", "--out", "s.jsonl"]);
    let e = err(d, &["eval", "--scores", "s.jsonl", "--methods", "semantic_energy", "--out", "e.json"]);
    assert_eq!(e["stage"], "eval");

    let e = err(d, &["synth", "--preset", "nope", "--out", "x.jsonl"]);
    assert!(e["error"].as_str().unwrap().contains("unknown synth preset"));
}
