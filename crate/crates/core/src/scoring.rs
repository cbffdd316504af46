//! Uncertainty scores over sampled responses.
//!
//! Entropy-family scores work from probabilities: token entropy averages,
//! sequence log-likelihood, and semantic entropy over clusters. Energy-family
//! scores work from raw logits: the per-token energy is the negated chosen
//! logit (divided by `ktau`), a response's energy is its mean over scorable
//! tokens, and a cluster's energy is the sum of its members' energies divided
//! by the number of samples `n`. The semantic-energy score of a response is
//! the energy of the cluster it belongs to; lower means more reliable.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{ClusterError, Clustering};
use crate::trace::{Correctness, QuestionRecord, ResponseTrace, TraceError};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Partition(#[from] ClusterError),
    #[error("weights cover {weights} tokens but the response has {tokens} scorable tokens")]
    WeightLength { weights: usize, tokens: usize },
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("cluster index {k} out of range (k = {clusters})")]
    ClusterIndex { k: usize, clusters: usize },
    #[error("response index {index} out of range ({n} responses)")]
    ResponseIndex { index: usize, n: usize },
    #[error("ktau must be positive and finite, got {0}")]
    Ktau(f64),
    #[error("question {question_id:?}: clustering covers {got} responses, expected {expected}")]
    ClusteringMismatch {
        question_id: String,
        expected: usize,
        got: usize,
    },
}

/// Uncertainty method tags, in canonical output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    EntropyAvg,
    EntropyWeighted,
    SeqLoglik,
    SemanticEntropy,
    ResponseEnergy,
    SemanticEnergy,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::EntropyAvg,
        Method::EntropyWeighted,
        Method::SeqLoglik,
        Method::SemanticEntropy,
        Method::ResponseEnergy,
        Method::SemanticEnergy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::EntropyAvg => "entropy_avg",
            Method::EntropyWeighted => "entropy_weighted",
            Method::SeqLoglik => "seq_loglik",
            Method::SemanticEntropy => "semantic_entropy",
            Method::ResponseEnergy => "response_energy",
            Method::SemanticEnergy => "semantic_energy",
        }
    }

    /// Maps a stored score onto the "higher = less reliable" axis used by
    /// the metrics. Only the log-likelihood points the other way.
    pub fn uncertainty(self, score: f64) -> f64 {
        match self {
            Method::SeqLoglik => -score,
            _ => score,
        }
    }

    pub fn is_energy(self) -> bool {
        matches!(self, Method::ResponseEnergy | Method::SemanticEnergy)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// Non-negative per-token weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightScheme {
    weights: Vec<f64>,
}

impl WeightScheme {
    const SUM_TOL: f64 = 1e-9;

    pub fn new(weights: Vec<f64>) -> Result<Self, ScoreError> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ScoreError::Weights("weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(ScoreError::Weights(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            weights: vec![1.0 / len as f64; len],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

/// Where `entropy_weighted` takes its weights from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    #[default]
    Uniform,
    /// Numeric per-token field carried in the trace's extra keys; normalized
    /// to sum to one over scorable tokens.
    TokenField(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub methods: Vec<Method>,
    /// Boltzmann constant times temperature; 1 matches the training softmax.
    pub ktau: f64,
    /// Length-normalize sequence log-likelihoods before the response softmax.
    pub length_normalized: bool,
    pub weights: WeightSource,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            ktau: 1.0,
            length_normalized: false,
            weights: WeightSource::Uniform,
        }
    }
}

// ---------------------------------------------------------------------------
// Token-level baselines
// ---------------------------------------------------------------------------

pub fn token_entropy_avg(response: &ResponseTrace) -> Result<f64, ScoreError> {
    let tokens = response.effective_tokens()?;
    Ok(tokens.iter().map(|t| t.full_entropy).sum::<f64>() / tokens.len() as f64)
}

pub fn token_entropy_weighted(
    response: &ResponseTrace,
    weights: &WeightScheme,
) -> Result<f64, ScoreError> {
    let tokens = response.effective_tokens()?;
    if tokens.len() != weights.weights.len() {
        return Err(ScoreError::WeightLength {
            weights: weights.weights.len(),
            tokens: tokens.len(),
        });
    }
    Ok(tokens
        .iter()
        .zip(&weights.weights)
        .map(|(t, w)| w * t.full_entropy)
        .sum())
}

/// Sum of chosen-token log-probabilities over scorable tokens.
pub fn sequence_log_likelihood(response: &ResponseTrace) -> Result<f64, ScoreError> {
    Ok(response
        .effective_tokens()?
        .iter()
        .map(|t| t.chosen_logprob)
        .sum())
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax over the responses' sequence log-likelihoods.
pub fn normalized_response_probs(
    question: &QuestionRecord,
    length_normalized: bool,
) -> Result<Vec<f64>, ScoreError> {
    let loglik = question
        .responses
        .iter()
        .map(|r| {
            let ll = sequence_log_likelihood(r)?;
            Ok(if length_normalized {
                ll / r.effective_len() as f64
            } else {
                ll
            })
        })
        .collect::<Result<Vec<_>, ScoreError>>()?;
    let lse = log_sum_exp(&loglik);
    Ok(loglik.iter().map(|l| (l - lse).exp()).collect())
}

fn check_partition(question: &QuestionRecord, clustering: &Clustering) -> Result<(), ScoreError> {
    clustering.validate(question.responses.len())?;
    Ok(())
}

/// Mass of each cluster under the response distribution.
pub fn cluster_probs_from(probs: &[f64], clustering: &Clustering) -> Vec<f64> {
    let mut mass = vec![0.0; clustering.k];
    for (p, &c) in probs.iter().zip(&clustering.assignments) {
        mass[c] += p;
    }
    mass
}

pub fn cluster_probs(
    question: &QuestionRecord,
    clustering: &Clustering,
    length_normalized: bool,
) -> Result<Vec<f64>, ScoreError> {
    check_partition(question, clustering)?;
    let probs = normalized_response_probs(question, length_normalized)?;
    Ok(cluster_probs_from(&probs, clustering))
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Entropy over semantic clusters. Exactly 0 when there is one cluster.
pub fn semantic_entropy(
    question: &QuestionRecord,
    clustering: &Clustering,
    length_normalized: bool,
) -> Result<f64, ScoreError> {
    check_partition(question, clustering)?;
    if clustering.k == 1 {
        return Ok(0.0);
    }
    let mass = cluster_probs(question, clustering, length_normalized)?;
    Ok(entropy(&mass).max(0.0))
}

// ---------------------------------------------------------------------------
// Energy
// ---------------------------------------------------------------------------

fn check_ktau(ktau: f64) -> Result<(), ScoreError> {
    if ktau > 0.0 && ktau.is_finite() {
        Ok(())
    } else {
        Err(ScoreError::Ktau(ktau))
    }
}

/// Mean per-token energy `-logit / ktau` over scorable tokens.
pub fn response_energy(response: &ResponseTrace, ktau: f64) -> Result<f64, ScoreError> {
    check_ktau(ktau)?;
    let tokens = response.effective_tokens()?;
    let sum: f64 = tokens.iter().map(|t| -t.chosen_logit).sum();
    Ok(sum / tokens.len() as f64 / ktau)
}

fn energies(question: &QuestionRecord, ktau: f64) -> Result<Vec<f64>, ScoreError> {
    question
        .responses
        .iter()
        .map(|r| response_energy(r, ktau))
        .collect()
}

/// Member energies of cluster `k`, summed and divided by the sample count.
fn cluster_energies_from(energies: &[f64], clustering: &Clustering) -> Vec<f64> {
    let n = energies.len() as f64;
    let mut sums = vec![0.0; clustering.k];
    for (e, &c) in energies.iter().zip(&clustering.assignments) {
        sums[c] += e;
    }
    sums.into_iter().map(|s| s / n).collect()
}

pub fn cluster_energy(
    question: &QuestionRecord,
    clustering: &Clustering,
    k: usize,
    ktau: f64,
) -> Result<f64, ScoreError> {
    check_partition(question, clustering)?;
    if k >= clustering.k {
        return Err(ScoreError::ClusterIndex {
            k,
            clusters: clustering.k,
        });
    }
    let e = energies(question, ktau)?;
    Ok(cluster_energies_from(&e, clustering)[k])
}

/// Semantic-energy uncertainty of response `index`: the energy of its cluster.
pub fn semantic_energy_score(
    question: &QuestionRecord,
    clustering: &Clustering,
    index: usize,
    ktau: f64,
) -> Result<f64, ScoreError> {
    let n = question.responses.len();
    if index >= n {
        return Err(ScoreError::ResponseIndex { index, n });
    }
    check_partition(question, clustering)?;
    cluster_energy(question, clustering, clustering.assignments[index], ktau)
}

// ---------------------------------------------------------------------------
// Batch scoring
// ---------------------------------------------------------------------------

/// All enabled scores for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub question_id: String,
    pub response_id: String,
    pub cluster: usize,
    pub k: usize,
    pub correct: Option<bool>,
    pub scores: BTreeMap<Method, f64>,
}

impl ScoreRow {
    pub fn score(&self, method: Method) -> Option<f64> {
        self.scores.get(&method).copied()
    }
}

fn weights_for(response: &ResponseTrace, source: &WeightSource) -> Result<WeightScheme, ScoreError> {
    let tokens = response.effective_tokens()?;
    match source {
        WeightSource::Uniform => Ok(WeightScheme::uniform(tokens.len())),
        WeightSource::TokenField(name) => {
            let raw = tokens
                .iter()
                .map(|t| {
                    t.extra.get(name).and_then(|v| v.as_f64()).ok_or_else(|| {
                        ScoreError::Weights(format!(
                            "response {:?}: token missing numeric weight field {name:?}",
                            response.response_id
                        ))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let total: f64 = raw.iter().sum();
            if total.is_nan() || total <= 0.0 {
                return Err(ScoreError::Weights(format!(
                    "response {:?}: weights sum to {total}",
                    response.response_id
                )));
            }
            WeightScheme::new(raw.into_iter().map(|w| w / total).collect())
        }
    }
}

/// One row per response carrying every method in `config.methods`.
pub fn score_question(
    question: &QuestionRecord,
    clustering: &Clustering,
    config: &ScoreConfig,
) -> Result<Vec<ScoreRow>, ScoreError> {
    let n = question.responses.len();
    if clustering.assignments.len() != n {
        return Err(ScoreError::ClusteringMismatch {
            question_id: question.question_id.clone(),
            expected: n,
            got: clustering.assignments.len(),
        });
    }
    check_partition(question, clustering)?;
    check_ktau(config.ktau)?;

    let wants = |m: Method| config.methods.contains(&m);
    let se = if wants(Method::SemanticEntropy) {
        Some(semantic_entropy(question, clustering, config.length_normalized)?)
    } else {
        None
    };
    let response_energies = if wants(Method::ResponseEnergy) || wants(Method::SemanticEnergy) {
        Some(energies(question, config.ktau)?)
    } else {
        None
    };
    let cluster_energies = response_energies
        .as_ref()
        .map(|e| cluster_energies_from(e, clustering));

    question
        .responses
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let cluster = clustering.assignments[i];
            let mut scores = BTreeMap::new();
            for &m in &config.methods {
                let v = match m {
                    Method::EntropyAvg => token_entropy_avg(r)?,
                    Method::EntropyWeighted => {
                        token_entropy_weighted(r, &weights_for(r, &config.weights)?)?
                    }
                    Method::SeqLoglik => sequence_log_likelihood(r)?,
                    Method::SemanticEntropy => se.expect("computed above"),
                    Method::ResponseEnergy => response_energies.as_ref().expect("computed above")[i],
                    Method::SemanticEnergy => cluster_energies.as_ref().expect("computed above")[cluster],
                };
                scores.insert(m, v);
            }
            Ok(ScoreRow {
                question_id: question.question_id.clone(),
                response_id: r.response_id.clone(),
                cluster,
                k: clustering.k,
                correct: match r.correct {
                    Correctness::Unjudged => None,
                    c => c.as_option(),
                },
                scores,
            })
        })
        .collect()
}

/// Scores every question; output follows input order for any `jobs`.
pub fn score_dataset(
    questions: &[QuestionRecord],
    clusterings: &[Clustering],
    config: &ScoreConfig,
    jobs: usize,
) -> Result<Vec<ScoreRow>, ScoreError> {
    let pairs: Vec<(&QuestionRecord, &Clustering)> = questions.iter().zip(clusterings).collect();
    let per_question = crate::parallel::try_map_ordered(&pairs, jobs, |(q, c)| {
        score_question(q, c, config)
    })?;
    Ok(per_question.into_iter().flatten().collect())
}
