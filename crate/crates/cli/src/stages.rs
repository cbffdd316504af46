//! One function per subcommand. Each reads its inputs from files, writes one
//! artifact plus a manifest, and returns a short JSON summary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use semergy_core::clustering::{
    cluster_dataset, CachedOracle, Clusterer, Clustering, DimensionChecked, EmbeddingProvider,
    EquivalenceOracle, HttpEmbedder, HttpOracle, JudgeStats, JudgmentCache, RuleTableOracle,
    Strategy, TableEmbedder,
};
use semergy_core::metrics::{evaluate, labeled_items, pr_curve, roc_curve, select_rows};
use semergy_core::scoring::{score_dataset, Method, ScoreConfig, ScoreRow, WeightSource};
use semergy_core::synth::{generate_config, SynthConfig};
use semergy_core::trace::{
    parse_trace_file_jobs, question_warnings, validate_question, write_trace_file, Dataset,
    DEFAULT_CONSISTENCY_TOL,
};
use semergy_core::MetricsReport;

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::report::render_text;

pub const MIXED_BENCHMARK: &str = "mixed-benchmark";

/// What a stage produced.
#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub stage: &'static str,
    pub artifact: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub summary: Value,
}

/// One line of a clusters artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLine {
    pub question_id: String,
    pub strategy: Strategy,
    pub k: usize,
    pub assignments: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Artifact I/O
// ---------------------------------------------------------------------------

pub fn read_traces(path: &Path, jobs: usize) -> Result<Dataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(parse_trace_file_jobs(BufReader::new(file), jobs)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}", path.display(), i + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_clusters(path: &Path) -> Result<Vec<ClusterLine>> {
    read_jsonl(path)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    read_jsonl(path)
}

/// Clusterings in trace order, checked against the trace question ids.
fn align_clusters(dataset: &Dataset, lines: Vec<ClusterLine>) -> Result<Vec<Clustering>> {
    ensure!(
        lines.len() == dataset.len(),
        "clusters file has {} questions, traces have {}",
        lines.len(),
        dataset.len()
    );
    dataset
        .questions
        .iter()
        .zip(lines)
        .enumerate()
        .map(|(i, (q, line))| {
            ensure!(
                q.question_id == line.question_id,
                "clusters line {}: question_id {:?} does not match trace question {:?}",
                i + 1,
                line.question_id,
                q.question_id
            );
            let c = Clustering {
                assignments: line.assignments,
                k: line.k,
                strategy: line.strategy,
            };
            c.validate(q.responses.len())
                .with_context(|| format!("clusters line {} ({})", i + 1, q.question_id))?;
            Ok(c)
        })
        .collect()
}

fn finish(
    stage: &'static str,
    inputs: &[&Path],
    config: Value,
    artifact: &Path,
    stats: Value,
) -> Result<Outcome> {
    let manifest = Manifest::new(stage, inputs, config, artifact, stats.clone())?.write(artifact)?;
    Ok(Outcome {
        stage,
        artifact: Some(artifact.to_path_buf()),
        manifest: Some(manifest),
        summary: stats,
    })
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Lints a trace file. Parse errors abort with the offending line; invariant
/// violations are collected and make the stage fail after the report is
/// written.
pub fn validate(cfg: &RunConfig) -> Result<Outcome> {
    let traces = cfg.require_input(&cfg.traces, "traces")?;
    let tol = cfg.tol.unwrap_or(DEFAULT_CONSISTENCY_TOL);
    ensure!(tol.is_finite() && tol >= 0.0, "--tol must be finite and non-negative, got {tol}");
    let dataset = read_traces(&traces, cfg.jobs())?;

    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    let mut responses = 0usize;
    for q in &dataset.questions {
        responses += q.responses.len();
        for v in validate_question(q, tol) {
            violations.push(json!({
                "question_id": q.question_id,
                "kind": v.kind,
                "path": v.path,
                "message": v.message,
            }));
        }
        for w in question_warnings(q) {
            warnings.push(json!({"question_id": q.question_id, "message": w}));
        }
    }
    let summary = json!({
        "questions": dataset.len(),
        "responses": responses,
        "violations": violations.len(),
        "warnings": warnings.len(),
    });
    let mut outcome = Outcome {
        stage: "validate",
        artifact: None,
        manifest: None,
        summary: summary.clone(),
    };
    if let Some(out) = &cfg.out {
        let report = json!({
            "summary": summary,
            "violations": violations,
            "warnings": warnings,
        });
        write_json(out, &report)?;
        outcome = finish("validate", &[&traces], json!({ "tol": tol }), out, summary)?;
    }
    if let Some(first) = violations.first() {
        bail!(
            "{} invariant violation(s); first: {}: {} {}",
            violations.len(),
            first["question_id"].as_str().unwrap_or_default(),
            first["path"].as_str().unwrap_or_default(),
            first["message"].as_str().unwrap_or_default()
        );
    }
    Ok(outcome)
}

enum Backend {
    Rules(RuleTableOracle),
    Http(HttpOracle),
}

impl Backend {
    fn oracle(&self) -> &dyn EquivalenceOracle {
        match self {
            Backend::Rules(r) => r,
            Backend::Http(h) => h,
        }
    }
}

enum Embedder {
    Table(TableEmbedder),
    Http(HttpEmbedder),
}

impl Embedder {
    fn provider(&self) -> &dyn EmbeddingProvider {
        match self {
            Embedder::Table(t) => t,
            Embedder::Http(h) => h,
        }
    }
}

/// `file://path` selects a local lookup table; anything else is an HTTP base
/// URL.
fn local_table(url: &str) -> Option<&Path> {
    url.strip_prefix("file://").map(Path::new)
}

pub fn cluster(cfg: &RunConfig) -> Result<Outcome> {
    let traces = cfg.require_input(&cfg.traces, "traces")?;
    let out = cfg.require_out()?;
    let strategy = cfg.strategy.unwrap_or(Strategy::Exact);
    let jobs = cfg.jobs();
    let dataset = read_traces(&traces, jobs)?;

    let mut config = json!({ "strategy": strategy });
    let mut stats = json!({ "questions": dataset.len() });
    let mut inputs: Vec<PathBuf> = vec![traces.clone()];

    let clusterings = match strategy {
        Strategy::Exact => cluster_dataset(&dataset.questions, Clusterer::Exact, jobs)?,
        Strategy::Entailment => {
            let url = cfg
                .oracle_url
                .as_deref()
                .context("entailment clustering needs --oracle-url")?;
            let backend = match local_table(url) {
                Some(path) => {
                    inputs.push(path.to_path_buf());
                    Backend::Rules(RuleTableOracle::from_file(path)?)
                }
                None => Backend::Http(HttpOracle::new(url)),
            };
            config["oracle_url"] = json!(url);
            let cache_path = cfg.cache_path();
            let cache = match &cache_path {
                Some(p) => JudgmentCache::load(p)?,
                None => JudgmentCache::new(),
            };
            let cached = CachedOracle::new(backend.oracle(), &cache);
            let result = cluster_dataset(&dataset.questions, Clusterer::Entailment(&cached), jobs);
            // Keep judgments gathered before a failure.
            if let Some(p) = &cache_path {
                cache.save(p)?;
            }
            let JudgeStats {
                oracle_calls,
                cache_hits,
            } = cached.stats();
            stats["oracle_calls"] = json!(oracle_calls);
            stats["cache_hits"] = json!(cache_hits);
            result?
        }
        Strategy::Embedding => {
            let url = cfg
                .embed_url
                .as_deref()
                .context("embedding clustering needs --embed-url")?;
            let threshold = cfg
                .threshold
                .context("embedding clustering needs --threshold")?;
            let embedder = match local_table(url) {
                Some(path) => {
                    inputs.push(path.to_path_buf());
                    Embedder::Table(TableEmbedder::from_file(path)?)
                }
                None => Embedder::Http(HttpEmbedder::new(url)),
            };
            config["embed_url"] = json!(url);
            config["threshold"] = json!(threshold);
            let checked = DimensionChecked::new(embedder.provider());
            cluster_dataset(
                &dataset.questions,
                Clusterer::Embedding {
                    embedder: &checked,
                    threshold,
                },
                jobs,
            )?
        }
    };

    let lines: Vec<ClusterLine> = dataset
        .questions
        .iter()
        .zip(&clusterings)
        .map(|(q, c)| ClusterLine {
            question_id: q.question_id.clone(),
            strategy: c.strategy,
            k: c.k,
            assignments: c.assignments.clone(),
        })
        .collect();
    write_jsonl(&out, &lines)?;
    stats["single_cluster_questions"] = json!(clusterings.iter().filter(|c| c.k == 1).count());
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    finish("cluster", &inputs, config, &out, stats)
}

pub fn score_config(cfg: &RunConfig) -> Result<ScoreConfig> {
    let ktau = cfg.ktau.unwrap_or(1.0);
    ensure!(ktau.is_finite() && ktau > 0.0, "--ktau must be finite and positive, got {ktau}");
    Ok(ScoreConfig {
        methods: cfg.methods(),
        ktau,
        length_normalized: cfg.length_normalized.unwrap_or(false),
        weights: match &cfg.weights_field {
            Some(name) => WeightSource::TokenField(name.clone()),
            None => WeightSource::Uniform,
        },
    })
}

pub fn score(cfg: &RunConfig) -> Result<Outcome> {
    let traces = cfg.require_input(&cfg.traces, "traces")?;
    let clusters = cfg.require_input(&cfg.clusters, "clusters")?;
    let out = cfg.require_out()?;
    let config = score_config(cfg)?;
    let jobs = cfg.jobs();

    let dataset = read_traces(&traces, jobs)?;
    let clusterings = align_clusters(&dataset, read_clusters(&clusters)?)?;
    let rows = score_dataset(&dataset.questions, &clusterings, &config, jobs)?;
    write_jsonl(&out, &rows)?;
    let stats = json!({ "questions": dataset.len(), "rows": rows.len() });
    finish("score", &[&traces, &clusters], serde_json::to_value(&config)?, &out, stats)
}

/// Methods to evaluate: the configured list, else every method the score
/// rows carry.
fn eval_methods(cfg: &RunConfig, rows: &[ScoreRow]) -> Vec<Method> {
    if let Some(m) = &cfg.methods {
        return m.clone();
    }
    Method::ALL
        .into_iter()
        .filter(|m| rows.first().is_some_and(|r| r.score(*m).is_some()))
        .collect()
}

fn metrics_report(cfg: &RunConfig, rows: &[ScoreRow]) -> Result<(MetricsReport, Value)> {
    let subset = cfg.subset.unwrap_or_default();
    let granularity = cfg.granularity.unwrap_or_default();
    let methods = eval_methods(cfg, rows);
    ensure!(!methods.is_empty(), "no methods to evaluate");
    let report = evaluate(rows, subset, granularity, &methods)?;
    let config = json!({
        "subset": subset,
        "granularity": granularity,
        "methods": methods,
    });
    Ok((report, config))
}

pub fn eval(cfg: &RunConfig) -> Result<Outcome> {
    let scores = cfg.require_input(&cfg.scores, "scores")?;
    let out = cfg.require_out()?;
    let rows = read_scores(&scores)?;
    let (report, config) = metrics_report(cfg, &rows)?;
    write_json(&out, &report)?;
    let stats = serde_json::to_value(&report)?;
    finish("eval", &[&scores], config, &out, stats)
}

/// Writes `report.json`, `report.txt` and per-method ROC/PR point files into
/// the `--out` directory.
pub fn report(cfg: &RunConfig) -> Result<Outcome> {
    let scores = cfg.require_input(&cfg.scores, "scores")?;
    let out = cfg.require_out()?;
    let rows = read_scores(&scores)?;
    let (report, config) = metrics_report(cfg, &rows)?;

    std::fs::create_dir_all(out.join("curves"))
        .with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("report.json"), &report)?;
    std::fs::write(out.join("report.txt"), render_text(&report))?;

    let selected = select_rows(&rows, report.subset, report.granularity);
    let mut curves = Vec::new();
    for m in &report.methods {
        let items = labeled_items(&selected, m.method)?;
        if let Ok(points) = roc_curve(&items) {
            let path = out.join("curves").join(format!("{}_roc.csv", m.method));
            write_csv(&path, &points)?;
            curves.push(path);
        }
        if let Ok(points) = pr_curve(&items) {
            let path = out.join("curves").join(format!("{}_pr.csv", m.method));
            write_csv(&path, &points)?;
            curves.push(path);
        }
    }
    let stats = json!({
        "counts": report.counts,
        "curve_files": curves.len(),
    });
    finish("report", &[&scores], config, &out, stats)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn synth_config(cfg: &RunConfig) -> Result<SynthConfig> {
    let mut config = match (cfg.preset.as_deref(), &cfg.synth) {
        (Some(MIXED_BENCHMARK), _) => SynthConfig::mixed_benchmark(0),
        (Some(other), _) => bail!("unknown synth preset {other:?}; known: {MIXED_BENCHMARK}"),
        (None, Some(c)) => c.clone(),
        (None, None) => bail!("synth needs --preset or a [synth] section in --config"),
    };
    if let Some(seed) = cfg.seed {
        config.seed = seed;
    }
    Ok(config)
}

pub fn synth(cfg: &RunConfig) -> Result<Outcome> {
    let out = cfg.require_out()?;
    let config = synth_config(cfg)?;
    let dataset = generate_config(&config, cfg.jobs())?;
    let mut w = create(&out)?;
    write_trace_file(&dataset, &mut w)?;
    let responses: usize = dataset.questions.iter().map(|q| q.responses.len()).sum();
    let stats = json!({ "questions": dataset.len(), "responses": responses });
    finish("synth", &[], serde_json::to_value(&config)?, &out, stats)
}
