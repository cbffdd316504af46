//! Run configuration: a TOML document whose keys mirror the command-line
//! flags. Flags win over file values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use semergy_core::synth::SynthConfig;
use semergy_core::{Granularity, Method, Strategy, Subset};

/// Environment variable naming the judgment cache directory.
pub const CACHE_DIR_ENV: &str = "SEMERGY_CACHE_DIR";
const CACHE_FILE: &str = "judgments.jsonl";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub traces: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,

    pub strategy: Option<Strategy>,
    pub oracle_url: Option<String>,
    pub embed_url: Option<String>,
    pub threshold: Option<f64>,

    pub methods: Option<Vec<Method>>,
    pub ktau: Option<f64>,
    pub length_normalized: Option<bool>,
    pub weights_field: Option<String>,

    pub subset: Option<Subset>,
    pub granularity: Option<Granularity>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,

    /// Named synth preset; takes precedence over the `[synth]` section.
    pub preset: Option<String>,
    pub synth: Option<SynthConfig>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($field:ident),* $(,)?) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field; } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Values set in `flags` replace values in `self`.
    pub fn merged(mut self, flags: RunConfig) -> Self {
        overlay!(self, flags;
            traces, clusters, scores, report, out, cache,
            strategy, oracle_url, embed_url, threshold,
            methods, ktau, length_normalized, weights_field,
            subset, granularity, tol, seed, jobs, preset, synth,
        );
        self
    }

    pub fn require_input(&self, value: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        let path = value
            .clone()
            .with_context(|| format!("missing required path: --{flag}"))?;
        if !path.exists() {
            bail!("input path does not exist: {}", path.display());
        }
        Ok(path)
    }

    pub fn require_out(&self) -> Result<PathBuf> {
        self.out.clone().context("missing required path: --out")
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or(1)
    }

    pub fn methods(&self) -> Vec<Method> {
        self.methods.clone().unwrap_or_else(|| Method::ALL.to_vec())
    }

    /// Explicit `cache` path, else `$SEMERGY_CACHE_DIR/judgments.jsonl`.
    pub fn cache_path(&self) -> Option<PathBuf> {
        self.cache.clone().or_else(|| {
            std::env::var_os(CACHE_DIR_ENV)
                .filter(|v| !v.is_empty())
                .map(|dir| PathBuf::from(dir).join(CACHE_FILE))
        })
    }
}

/// Parses a comma-separated `--methods` value.
pub fn parse_methods(value: &str) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for tag in value.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let m: Method = tag.parse().map_err(anyhow::Error::msg)?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        bail!("--methods needs at least one method tag");
    }
    Ok(out)
}
