//! File-based pipeline over the `semergy-core` library:
//! `validate`, `cluster`, `score`, `eval`, `report` and `synth`.
//!
//! Every stage reads artifacts from disk and writes one artifact plus a
//! `*.manifest.json` recording input digests, the effective configuration and
//! the tool version. Artifacts are byte-identical across runs and `--jobs`
//! values; only the manifest timestamp changes.

pub mod config;
pub mod manifest;
pub mod report;
pub mod stages;

use serde_json::{json, Value};

use semergy_core::trace::TraceError;

pub use config::RunConfig;
pub use stages::Outcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Cluster,
    Score,
    Eval,
    Report,
    Synth,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Cluster => "cluster",
            Command::Score => "score",
            Command::Eval => "eval",
            Command::Report => "report",
            Command::Synth => "synth",
        }
    }
}

pub fn run(command: Command, config: &RunConfig) -> anyhow::Result<Outcome> {
    match command {
        Command::Validate => stages::validate(config),
        Command::Cluster => stages::cluster(config),
        Command::Score => stages::score(config),
        Command::Eval => stages::eval(config),
        Command::Report => stages::report(config),
        Command::Synth => stages::synth(config),
    }
}

/// Single-line JSON describing a failed stage. Carries `line` when the
/// failure traces back to a specific record of a trace file.
pub fn error_json(stage: &str, err: &anyhow::Error) -> Value {
    let message = err
        .chain()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(": ");
    let mut out = json!({ "error": message, "stage": stage });
    if let Some(line) = err
        .chain()
        .find_map(|e| e.downcast_ref::<TraceError>())
        .and_then(TraceError::line)
    {
        out["line"] = json!(line);
    }
    out
}
