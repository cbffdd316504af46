//! Synthetic trace datasets with known ground truth.
//!
//! Each question follows one cluster plan. Responses that share a planned
//! cluster share their text, so exact-match clustering recovers the plan.
//! Per-token logits are Gaussian with a plan-level mean; `log_z` sits a
//! positive half-normal offset above the logit so the recorded log-probability
//! is negative and exactly consistent.
//!
//! Every question draws from its own RNG stream derived from the dataset seed
//! and the question's global index, so generation can be split across
//! threads without changing the output.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Map;
use thiserror::Error;

use crate::clustering::Clustering;
use crate::scoring::{Method, ScoreRow};
use crate::trace::{
    Correctness, Dataset, QuestionRecord, ResponseTrace, SamplingMeta, TokenTrace,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid regime spec: {0}")]
    InvalidSpec(String),
    #[error("instance too large for brute force: n = {n}, max tokens = {tokens} (limits n <= {max_n}, T <= {max_t})")]
    TooLarge {
        n: usize,
        tokens: usize,
        max_n: usize,
        max_t: usize,
    },
    #[error("clustering does not cover the question's {0} responses")]
    Partition(usize),
    #[error("response {0:?} has no scorable tokens")]
    Empty(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterPlan {
    /// Well-covered question: one meaning, strong logits.
    SingleClusterHighLogit,
    /// Poorly covered question: one meaning, weak logits.
    SingleClusterLowLogit,
    MultiCluster,
}

impl ClusterPlan {
    fn default_entropy_mean(self) -> f64 {
        match self {
            ClusterPlan::SingleClusterHighLogit => 0.05,
            ClusterPlan::SingleClusterLowLogit => 0.8,
            ClusterPlan::MultiCluster => 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    pub questions: usize,
    /// Responses per question.
    pub n: usize,
    /// Inclusive range of response lengths in tokens.
    pub token_len: (usize, usize),
    pub cluster_plan: ClusterPlan,
    pub logit_mean: f64,
    pub logit_sd: f64,
    pub correct_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Number of distinct answers available to the multi-cluster plan.
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    /// Mean per-token entropy; defaults by plan (peaked plans near zero).
    #[serde(default)]
    pub entropy_mean: Option<f64>,
}

fn default_clusters() -> usize {
    3
}

impl RegimeSpec {
    pub fn new(plan: ClusterPlan, questions: usize, n: usize, tokens: usize) -> Self {
        Self {
            questions,
            n,
            token_len: (tokens, tokens),
            cluster_plan: plan,
            logit_mean: 10.0,
            logit_sd: 2.0,
            correct_fraction: 0.5,
            seed: 0,
            clusters: default_clusters(),
            entropy_mean: None,
        }
    }

    pub fn logits(mut self, mean: f64, sd: f64) -> Self {
        self.logit_mean = mean;
        self.logit_sd = sd;
        self
    }

    pub fn correct_fraction(mut self, fraction: f64) -> Self {
        self.correct_fraction = fraction;
        self
    }

    pub fn token_len(mut self, min: usize, max: usize) -> Self {
        self.token_len = (min, max);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn clusters(mut self, clusters: usize) -> Self {
        self.clusters = clusters;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if self.token_len.0 == 0 || self.token_len.0 > self.token_len.1 {
            return bad("token_len must be a non-empty range of positive lengths");
        }
        if !(self.logit_sd > 0.0 && self.logit_sd.is_finite()) {
            return bad("logit_sd must be positive");
        }
        if !self.logit_mean.is_finite() {
            return bad("logit_mean must be finite");
        }
        if !(0.0..=1.0).contains(&self.correct_fraction) {
            return bad("correct_fraction must lie in [0, 1]");
        }
        if self.cluster_plan == ClusterPlan::MultiCluster && self.clusters < 2 {
            return bad("multi_cluster plan needs clusters >= 2");
        }
        if let Some(h) = self.entropy_mean {
            if !(h >= 0.0 && h.is_finite()) {
                return bad("entropy_mean must be non-negative");
            }
        }
        Ok(())
    }
}

/// A dataset assembled from one or more regimes, sharing one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    #[serde(default = "default_vocab")]
    pub vocab_size: u64,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(rename = "regime")]
    pub regimes: Vec<RegimeSpec>,
}

fn default_vocab() -> u64 {
    32_000
}

fn default_model() -> String {
    "synthetic".into()
}

impl SynthConfig {
    pub fn new(seed: u64, regimes: Vec<RegimeSpec>) -> Self {
        Self {
            seed,
            vocab_size: default_vocab(),
            model: default_model(),
            regimes,
        }
    }

    /// Confident-correct versus confident-wrong benchmark: 500 single-cluster
    /// questions answered correctly with logits around 15 and 500 answered
    /// wrongly with logits around 8, five samples of eight tokens each.
    pub fn mixed_benchmark(seed: u64) -> Self {
        Self::new(
            seed,
            vec![
                RegimeSpec::new(ClusterPlan::SingleClusterHighLogit, 500, 5, 8)
                    .logits(15.0, 2.0)
                    .correct_fraction(1.0),
                RegimeSpec::new(ClusterPlan::SingleClusterLowLogit, 500, 5, 8)
                    .logits(8.0, 2.0)
                    .correct_fraction(0.0),
            ],
        )
    }

    pub fn total_questions(&self) -> usize {
        self.regimes.iter().map(|r| r.questions).sum()
    }
}

/// Generate one regime using its own seed.
pub fn generate(spec: &RegimeSpec) -> Result<Dataset, SynthError> {
    generate_config(&SynthConfig::new(spec.seed, vec![spec.clone()]), 1)
}

/// Generate every regime in order; identical output for any `jobs`.
pub fn generate_config(config: &SynthConfig, jobs: usize) -> Result<Dataset, SynthError> {
    for spec in &config.regimes {
        spec.validate()?;
    }
    let mut plan: Vec<(usize, &RegimeSpec)> = Vec::with_capacity(config.total_questions());
    for spec in &config.regimes {
        for _ in 0..spec.questions {
            plan.push((plan.len(), spec));
        }
    }
    let questions = crate::parallel::map_ordered(&plan, jobs, |&(index, spec)| {
        generate_question(config, spec, index)
    });
    Ok(Dataset { questions })
}

/// SplitMix64 finalizer; decorrelates per-question seeds.
fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn generate_question(config: &SynthConfig, spec: &RegimeSpec, index: usize) -> QuestionRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, index as u64));
    let logit = Normal::new(spec.logit_mean, spec.logit_sd).expect("validated sd");
    let offset = Normal::new(2.0, 0.5).expect("constant parameters");
    let entropy_mean = spec
        .entropy_mean
        .unwrap_or_else(|| spec.cluster_plan.default_entropy_mean());
    let entropy = Normal::new(entropy_mean, (entropy_mean * 0.25).max(1e-3)).expect("positive sd");
    let entropy_cap = (config.vocab_size.max(1) as f64).ln();

    let question_correct = rng.random_bool(spec.correct_fraction);
    let qid = format!("q{index}");

    let responses = (0..spec.n)
        .map(|i| {
            let cluster = match spec.cluster_plan {
                ClusterPlan::MultiCluster => rng.random_range(0..spec.clusters),
                _ => 0,
            };
            let correct = question_correct && cluster == 0;
            let len = rng.random_range(spec.token_len.0..=spec.token_len.1);
            let tokens = (0..len)
                .map(|_| {
                    let z: f64 = logit.sample(&mut rng);
                    let gap: f64 = offset.sample(&mut rng);
                    let log_z = z + gap.abs();
                    let h: f64 = entropy.sample(&mut rng);
                    let id = rng.random_range(0..config.vocab_size.max(1));
                    TokenTrace {
                        text: format!("tok{id}"),
                        token_id: id,
                        chosen_logit: z,
                        chosen_logprob: z - log_z,
                        full_entropy: h.abs().min(entropy_cap),
                        position_log_z: log_z,
                        scored: true,
                        extra: Map::new(),
                    }
                })
                .collect();
            ResponseTrace {
                response_id: format!("{qid}-r{i}"),
                text: format!("ans-{qid}-c{cluster}"),
                correct: Correctness::from_option(Some(correct)),
                tokens,
                extra: Map::new(),
            }
        })
        .collect();

    QuestionRecord {
        question_id: qid.clone(),
        prompt: format!("synthetic question {index}"),
        gold_answers: if question_correct {
            vec![format!("ans-{qid}-c0")]
        } else {
            vec![format!("gold-{qid}")]
        },
        sampling_meta: SamplingMeta {
            n: spec.n as u64,
            temperature: 1.0,
            top_p: 1.0,
            model: config.model.clone(),
            seed: Some(config.seed),
            vocab_size: Some(config.vocab_size),
            extra: Map::new(),
        },
        responses,
        extra: Map::new(),
    }
}

// ---------------------------------------------------------------------------
// Brute-force reference scores
// ---------------------------------------------------------------------------

pub const BRUTE_FORCE_MAX_N: usize = 10;
pub const BRUTE_FORCE_MAX_T: usize = 12;

/// Reference scores computed by direct evaluation: plain products of token
/// probabilities, no log-space shortcuts, `ktau = 1`, uniform weights.
pub fn brute_force_scores(
    question: &QuestionRecord,
    clustering: &Clustering,
) -> Result<Vec<ScoreRow>, SynthError> {
    let n = question.responses.len();
    let longest = question.responses.iter().map(|r| r.tokens.len()).max().unwrap_or(0);
    if n > BRUTE_FORCE_MAX_N || longest > BRUTE_FORCE_MAX_T {
        return Err(SynthError::TooLarge {
            n,
            tokens: longest,
            max_n: BRUTE_FORCE_MAX_N,
            max_t: BRUTE_FORCE_MAX_T,
        });
    }
    if clustering.assignments.len() != n || clustering.assignments.iter().any(|&c| c >= clustering.k) {
        return Err(SynthError::Partition(n));
    }

    // Per-response token lists restricted to scored tokens.
    let mut scored: Vec<Vec<&TokenTrace>> = Vec::with_capacity(n);
    for r in &question.responses {
        let toks: Vec<&TokenTrace> = r.tokens.iter().filter(|t| t.scored).collect();
        if toks.is_empty() {
            return Err(SynthError::Empty(r.response_id.clone()));
        }
        scored.push(toks);
    }

    let mut joint = vec![0.0; n];
    for i in 0..n {
        let mut p = 1.0;
        for t in &scored[i] {
            p *= t.chosen_logprob.exp();
        }
        joint[i] = p;
    }
    let total: f64 = joint.iter().sum();

    let mut cluster_mass = vec![0.0; clustering.k];
    let mut cluster_energy_sum = vec![0.0; clustering.k];
    let mut energy = vec![0.0; n];
    for i in 0..n {
        let c = clustering.assignments[i];
        cluster_mass[c] += joint[i] / total;
        let mut e = 0.0;
        for t in &scored[i] {
            e += -t.chosen_logit;
        }
        energy[i] = e / scored[i].len() as f64;
        cluster_energy_sum[c] += energy[i];
    }
    let mut semantic_entropy = 0.0;
    for &p in &cluster_mass {
        if p > 0.0 {
            semantic_entropy -= p * p.ln();
        }
    }

    let mut rows = Vec::with_capacity(n);
    for (i, r) in question.responses.iter().enumerate() {
        let toks = &scored[i];
        let len = toks.len() as f64;
        let mut h_sum = 0.0;
        let mut h_weighted = 0.0;
        let mut loglik = 0.0;
        for t in toks {
            h_sum += t.full_entropy;
            h_weighted += t.full_entropy / len;
            loglik += t.chosen_logprob;
        }
        let c = clustering.assignments[i];
        let mut scores = BTreeMap::new();
        scores.insert(Method::EntropyAvg, h_sum / len);
        scores.insert(Method::EntropyWeighted, h_weighted);
        scores.insert(Method::SeqLoglik, loglik);
        scores.insert(Method::SemanticEntropy, semantic_entropy);
        scores.insert(Method::ResponseEnergy, energy[i]);
        scores.insert(Method::SemanticEnergy, cluster_energy_sum[c] / n as f64);
        rows.push(ScoreRow {
            question_id: question.question_id.clone(),
            response_id: r.response_id.clone(),
            cluster: c,
            k: clustering.k,
            correct: r.correct.as_option(),
            scores,
        });
    }
    Ok(rows)
}
