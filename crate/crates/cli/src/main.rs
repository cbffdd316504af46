use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semergy_cli::config::{parse_methods, RunConfig};
use semergy_cli::{error_json, run, Command};
use semergy_core::{Granularity, Strategy, Subset};

#[derive(Parser)]
#[command(name = "semergy", version, about = "Logit-energy uncertainty scoring pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Lint a trace file against the schema and token invariants.
    Validate(Flags),
    /// Group each question's responses into semantic clusters.
    Cluster(Flags),
    /// Compute per-response uncertainty scores.
    Score(Flags),
    /// AUROC, AUPR and FPR95 per method.
    Eval(Flags),
    /// Metrics as JSON and text plus ROC/PR curve points.
    Report(Flags),
    /// Generate a synthetic trace file.
    Synth(Flags),
}

#[derive(Args, Default)]
struct Flags {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long)]
    clusters: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Judgment cache file; defaults to $SEMERGY_CACHE_DIR/judgments.jsonl.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, value_parser = ["exact", "entailment", "embedding"])]
    strategy: Option<String>,
    /// Base URL of the /judge service, or file://rules.json.
    #[arg(long)]
    oracle_url: Option<String>,
    /// Base URL of the /embed service, or file://vectors.json.
    #[arg(long)]
    embed_url: Option<String>,
    /// Cosine similarity threshold for embedding clustering.
    #[arg(long)]
    threshold: Option<f64>,
    /// Comma-separated method tags.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    ktau: Option<f64>,
    /// Length-normalize log-likelihoods before the response softmax.
    #[arg(long)]
    length_normalized: bool,
    /// Token field holding per-token weights for the weighted entropy.
    #[arg(long)]
    weights_field: Option<String>,
    #[arg(long, value_parser = ["all", "single-cluster"])]
    subset: Option<String>,
    #[arg(long, value_parser = ["response", "question"])]
    granularity: Option<String>,
    /// Consistency tolerance for `validate`.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    /// Synth preset (mixed-benchmark).
    #[arg(long)]
    preset: Option<String>,
}

impl Flags {
    fn into_config(self) -> anyhow::Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            traces: self.traces,
            clusters: self.clusters,
            scores: self.scores,
            out: self.out,
            cache: self.cache,
            strategy: self
                .strategy
                .map(|s| s.parse::<Strategy>())
                .transpose()
                .map_err(anyhow::Error::msg)?,
            oracle_url: self.oracle_url,
            embed_url: self.embed_url,
            threshold: self.threshold,
            methods: self.methods.as_deref().map(parse_methods).transpose()?,
            ktau: self.ktau,
            length_normalized: self.length_normalized.then_some(true),
            weights_field: self.weights_field,
            subset: self
                .subset
                .map(|s| s.parse::<Subset>())
                .transpose()
                .map_err(anyhow::Error::msg)?,
            granularity: self
                .granularity
                .map(|s| s.parse::<Granularity>())
                .transpose()
                .map_err(anyhow::Error::msg)?,
            tol: self.tol,
            seed: self.seed,
            jobs: self.jobs,
            preset: self.preset,
            ..Default::default()
        };
        Ok(base.merged(flags))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, flags) = match cli.command {
        Sub::Validate(f) => (Command::Validate, f),
        Sub::Cluster(f) => (Command::Cluster, f),
        Sub::Score(f) => (Command::Score, f),
        Sub::Eval(f) => (Command::Eval, f),
        Sub::Report(f) => (Command::Report, f),
        Sub::Synth(f) => (Command::Synth, f),
    };
    match flags.into_config().and_then(|cfg| run(command, &cfg)) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string(&outcome).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_json(command.name(), &err));
            ExitCode::FAILURE
        }
    }
}
