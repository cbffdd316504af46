//! Semantic clustering of sampled responses.
//!
//! Every strategy shares one greedy representative scheme: responses are
//! visited in input order and compared with the first member of each existing
//! cluster, in cluster order. A response joins the first cluster it matches,
//! otherwise it opens a new one. Strategies differ only in what "matches"
//! means: equal normalized text, bidirectional entailment judged by an
//! external oracle, or embedding cosine similarity above a threshold.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, OnceLock, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{QuestionRecord, ResponseTrace};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cannot cluster an empty response set")]
    Empty,
    #[error("oracle failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding provider returned {got} vectors for {expected} texts")]
    VectorCount { expected: usize, got: usize },
    #[error("threshold must lie in (0, 1], got {0}")]
    Threshold(f64),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("mock table: {0}")]
    MockTable(String),
    #[error("cache file {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Exact,
    Entailment,
    Embedding,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Exact => "exact",
            Strategy::Entailment => "entailment",
            Strategy::Embedding => "embedding",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Strategy::Exact),
            "entailment" => Ok(Strategy::Entailment),
            "embedding" => Ok(Strategy::Embedding),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

/// Partition of one question's responses into `k` clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    /// `assignments[i]` is the cluster of response `i`.
    pub assignments: Vec<usize>,
    pub k: usize,
    pub strategy: Strategy,
}

impl Clustering {
    /// Checks that cluster ids are contiguous, every cluster is non-empty
    /// and the partition covers exactly `n` responses.
    pub fn validate(&self, n: usize) -> Result<(), ClusterError> {
        if self.assignments.len() != n {
            return Err(ClusterError::InvalidPartition(format!(
                "{} assignments for {} responses",
                self.assignments.len(),
                n
            )));
        }
        let mut sizes = vec![0usize; self.k];
        for (i, &c) in self.assignments.iter().enumerate() {
            if c >= self.k {
                return Err(ClusterError::InvalidPartition(format!(
                    "response {i} assigned to cluster {c} but k = {}",
                    self.k
                )));
            }
            sizes[c] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(ClusterError::InvalidPartition(format!(
                "cluster {empty} is empty"
            )));
        }
        Ok(())
    }

    /// Response indices of cluster `k`, ascending.
    pub fn members(&self, k: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &c in &self.assignments {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Lowercase, strip punctuation, drop a leading article, collapse whitespace.
pub fn normalize_text(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punctuation(*c))
        .flat_map(char::to_lowercase)
        .collect();
    let mut words = cleaned.split_whitespace().peekable();
    while let Some(&w) = words.peek() {
        if matches!(w, "a" | "an" | "the") {
            words.next();
        } else {
            break;
        }
    }
    words.collect::<Vec<_>>().join(" ")
}

fn is_unicode_punctuation(c: char) -> bool {
    matches!(
        c,
        '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{3001}'..='\u{3003}' | '¡' | '¿' | '«' | '»'
    )
}

/// Greedy representative clustering driven by a fallible match predicate.
fn greedy<E>(
    n: usize,
    strategy: Strategy,
    mut matches: impl FnMut(usize, usize) -> Result<bool, E>,
) -> Result<Clustering, E> {
    let mut representatives: Vec<usize> = Vec::new();
    let mut assignments = Vec::with_capacity(n);
    for i in 0..n {
        let mut joined = None;
        for (c, &rep) in representatives.iter().enumerate() {
            if matches(rep, i)? {
                joined = Some(c);
                break;
            }
        }
        let c = joined.unwrap_or_else(|| {
            representatives.push(i);
            representatives.len() - 1
        });
        assignments.push(c);
    }
    Ok(Clustering {
        assignments,
        k: representatives.len(),
        strategy,
    })
}

/// Responses with equal normalized text share a cluster.
pub fn exact_match_cluster(responses: &[ResponseTrace]) -> Result<Clustering, ClusterError> {
    if responses.is_empty() {
        return Err(ClusterError::Empty);
    }
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut assignments = Vec::with_capacity(responses.len());
    for r in responses {
        let next = index.len();
        assignments.push(*index.entry(normalize_text(&r.text)).or_insert(next));
    }
    Ok(Clustering {
        assignments,
        k: index.len(),
        strategy: Strategy::Exact,
    })
}

// ---------------------------------------------------------------------------
// Entailment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceJudgment {
    pub a_entails_b: bool,
    pub b_entails_a: bool,
}

impl EquivalenceJudgment {
    pub fn new(a_entails_b: bool, b_entails_a: bool) -> Self {
        Self {
            a_entails_b,
            b_entails_a,
        }
    }

    /// Equivalence requires entailment in both directions.
    pub fn equivalent(&self) -> bool {
        self.a_entails_b && self.b_entails_a
    }

    fn swapped(self) -> Self {
        Self::new(self.b_entails_a, self.a_entails_b)
    }
}

/// Judges whether `a` and `b` entail each other given `question`.
pub trait EquivalenceOracle: Send + Sync {
    fn judge(&self, question: &str, a: &str, b: &str) -> Result<EquivalenceJudgment, ClusterError>;
}

/// Greedy clustering where a candidate joins a cluster when it and the
/// cluster's representative are judged bidirectionally entailing.
pub fn greedy_entailment_cluster(
    prompt: &str,
    responses: &[ResponseTrace],
    oracle: &dyn EquivalenceOracle,
) -> Result<Clustering, ClusterError> {
    if responses.is_empty() {
        return Err(ClusterError::Empty);
    }
    greedy(responses.len(), Strategy::Entailment, |rep, cand| {
        oracle
            .judge(prompt, &responses[rep].text, &responses[cand].text)
            .map(|j| j.equivalent())
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct JudgeRequest<'a> {
    question: &'a str,
    a: &'a str,
    b: &'a str,
}

/// Client for an HTTP `POST /judge` endpoint.
pub struct HttpOracle {
    agent: ureq::Agent,
    url: String,
    retries: u32,
    backoff: Duration,
}

impl HttpOracle {
    /// `base_url` may point at the server root or directly at `/judge`.
    pub fn new(base_url: &str) -> Self {
        Self {
            agent: http_agent(),
            url: endpoint(base_url, "judge"),
            retries: 3,
            backoff: Duration::from_millis(100),
        }
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }
}

impl EquivalenceOracle for HttpOracle {
    fn judge(&self, question: &str, a: &str, b: &str) -> Result<EquivalenceJudgment, ClusterError> {
        let body = JudgeRequest { question, a, b };
        with_retries(self.retries, self.backoff, || {
            self.agent
                .post(&self.url)
                .send_json(&body)?
                .body_mut()
                .read_json::<EquivalenceJudgment>()
        })
    }
}

fn http_agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(60)))
        .build()
        .into()
}

fn endpoint(base: &str, route: &str) -> String {
    let trimmed = base.trim_end_matches('/');
    if trimmed.ends_with(&format!("/{route}")) {
        trimmed.to_string()
    } else {
        format!("{trimmed}/{route}")
    }
}

fn with_retries<T>(
    retries: u32,
    backoff: Duration,
    mut call: impl FnMut() -> Result<T, ureq::Error>,
) -> Result<T, ClusterError> {
    let attempts = retries + 1;
    let mut last = String::new();
    for attempt in 0..attempts {
        match call() {
            Ok(v) => return Ok(v),
            Err(e) => {
                last = e.to_string();
                if attempt + 1 < attempts {
                    std::thread::sleep(backoff * 2u32.pow(attempt));
                }
            }
        }
    }
    Err(ClusterError::Transport {
        attempts,
        message: last,
    })
}

/// Rule-table oracle for tests and offline runs.
///
/// Table file format (texts compared after [`normalize_text`]):
/// `{"equivalent": [["a", "b"], ...], "entails": [["premise", "hypothesis"], ...]}`.
/// Identical normalized texts always entail each other.
#[derive(Debug, Default, Clone)]
pub struct RuleTableOracle {
    entails: std::collections::HashSet<(String, String)>,
}

#[derive(Deserialize)]
struct RuleTableFile {
    #[serde(default)]
    equivalent: Vec<(String, String)>,
    #[serde(default)]
    entails: Vec<(String, String)>,
}

impl RuleTableOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn equivalent(mut self, a: &str, b: &str) -> Self {
        self.add_entails(a, b);
        self.add_entails(b, a);
        self
    }

    pub fn entails(mut self, premise: &str, hypothesis: &str) -> Self {
        self.add_entails(premise, hypothesis);
        self
    }

    fn add_entails(&mut self, a: &str, b: &str) {
        self.entails.insert((normalize_text(a), normalize_text(b)));
    }

    pub fn from_json(text: &str) -> Result<Self, ClusterError> {
        let file: RuleTableFile =
            serde_json::from_str(text).map_err(|e| ClusterError::MockTable(e.to_string()))?;
        let mut table = Self::new();
        for (a, b) in &file.equivalent {
            table = table.equivalent(a, b);
        }
        for (a, b) in &file.entails {
            table.add_entails(a, b);
        }
        Ok(table)
    }

    pub fn from_file(path: &Path) -> Result<Self, ClusterError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ClusterError::MockTable(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn one_way(&self, a: &str, b: &str) -> bool {
        let (na, nb) = (normalize_text(a), normalize_text(b));
        na == nb || self.entails.contains(&(na, nb))
    }
}

impl EquivalenceOracle for RuleTableOracle {
    fn judge(&self, _question: &str, a: &str, b: &str) -> Result<EquivalenceJudgment, ClusterError> {
        Ok(EquivalenceJudgment::new(self.one_way(a, b), self.one_way(b, a)))
    }
}

type CacheKey = (String, String, String);

/// Judgment cache keyed by `(question, a, b)`, safe for concurrent use.
///
/// Persisted as JSONL sorted by key so the file is byte-stable.
#[derive(Debug, Default)]
pub struct JudgmentCache {
    entries: RwLock<BTreeMap<CacheKey, EquivalenceJudgment>>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    question: String,
    a: String,
    b: String,
    a_entails_b: bool,
    b_entails_a: bool,
}

impl JudgmentCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Looks up `(q, a, b)`, falling back to the mirrored `(q, b, a)` entry.
    pub fn get(&self, question: &str, a: &str, b: &str) -> Option<EquivalenceJudgment> {
        let map = self.entries.read().expect("cache lock poisoned");
        let key = (question.to_string(), a.to_string(), b.to_string());
        if let Some(j) = map.get(&key) {
            return Some(*j);
        }
        let mirrored = (key.0, key.2, key.1);
        map.get(&mirrored).map(|j| j.swapped())
    }

    pub fn insert(&self, question: &str, a: &str, b: &str, judgment: EquivalenceJudgment) {
        self.entries
            .write()
            .expect("cache lock poisoned")
            .insert((question.into(), a.into(), b.into()), judgment);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads a cache file; a missing file yields an empty cache.
    pub fn load(path: &Path) -> Result<Self, ClusterError> {
        let cache = Self::new();
        let file = match fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(cache),
            Err(e) => return Err(cache_err(path, e)),
        };
        {
            let mut map = cache.entries.write().expect("cache lock poisoned");
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| cache_err(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine =
                    serde_json::from_str(&line).map_err(|e| cache_err(path, e))?;
                map.insert(
                    (entry.question, entry.a, entry.b),
                    EquivalenceJudgment::new(entry.a_entails_b, entry.b_entails_a),
                );
            }
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClusterError> {
        let map = self.entries.read().expect("cache lock poisoned");
        let mut out = Vec::new();
        for ((question, a, b), j) in map.iter() {
            let line = CacheLine {
                question: question.clone(),
                a: a.clone(),
                b: b.clone(),
                a_entails_b: j.a_entails_b,
                b_entails_a: j.b_entails_a,
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| cache_err(path, e))?;
            out.push(b'\n');
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| cache_err(path, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| cache_err(path, e))?;
        file.write_all(&out).map_err(|e| cache_err(path, e))
    }
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> ClusterError {
    ClusterError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct JudgeStats {
    pub oracle_calls: u64,
    pub cache_hits: u64,
}

/// Oracle wrapper that consults a [`JudgmentCache`] before the backend.
pub struct CachedOracle<'a> {
    inner: &'a dyn EquivalenceOracle,
    cache: &'a JudgmentCache,
    calls: AtomicU64,
    hits: AtomicU64,
}

impl<'a> CachedOracle<'a> {
    pub fn new(inner: &'a dyn EquivalenceOracle, cache: &'a JudgmentCache) -> Self {
        Self {
            inner,
            cache,
            calls: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        }
    }

    pub fn stats(&self) -> JudgeStats {
        JudgeStats {
            oracle_calls: self.calls.load(Ordering::Relaxed),
            cache_hits: self.hits.load(Ordering::Relaxed),
        }
    }
}

impl EquivalenceOracle for CachedOracle<'_> {
    fn judge(&self, question: &str, a: &str, b: &str) -> Result<EquivalenceJudgment, ClusterError> {
        if let Some(j) = self.cache.get(question, a, b) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(j);
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let j = self.inner.judge(question, a, b)?;
        self.cache.insert(question, a, b, j);
        Ok(j)
    }
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClusterError>;
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for an HTTP `POST /embed` endpoint. Remembers the dimension of
/// the first response and rejects later responses that disagree.
pub struct HttpEmbedder {
    agent: ureq::Agent,
    url: String,
    retries: u32,
    backoff: Duration,
    dim: OnceLock<usize>,
}

impl HttpEmbedder {
    pub fn new(base_url: &str) -> Self {
        Self {
            agent: http_agent(),
            url: endpoint(base_url, "embed"),
            retries: 3,
            backoff: Duration::from_millis(100),
            dim: OnceLock::new(),
        }
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClusterError> {
        let body = EmbedRequest { texts };
        let resp: EmbedResponse = with_retries(self.retries, self.backoff, || {
            self.agent
                .post(&self.url)
                .send_json(&body)?
                .body_mut()
                .read_json::<EmbedResponse>()
        })?;
        if let Some(first) = resp.vectors.first() {
            let expected = *self.dim.get_or_init(|| first.len());
            check_dims(&resp.vectors, expected)?;
        }
        Ok(resp.vectors)
    }
}

/// Lookup-table embedder: `{"vectors": {"text": [f64, ...], ...}}`.
#[derive(Debug, Default, Clone)]
pub struct TableEmbedder {
    vectors: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct EmbedTableFile {
    vectors: HashMap<String, Vec<f64>>,
}

impl TableEmbedder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, text: &str, vector: Vec<f64>) -> Self {
        self.vectors.insert(text.to_string(), vector);
        self
    }

    pub fn from_json(text: &str) -> Result<Self, ClusterError> {
        let file: EmbedTableFile =
            serde_json::from_str(text).map_err(|e| ClusterError::MockTable(e.to_string()))?;
        Ok(Self {
            vectors: file.vectors,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ClusterError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ClusterError::MockTable(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl EmbeddingProvider for TableEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClusterError> {
        texts
            .iter()
            .map(|t| {
                self.vectors
                    .get(t)
                    .cloned()
                    .ok_or_else(|| ClusterError::MockTable(format!("no vector for {t:?}")))
            })
            .collect()
    }
}

fn check_dims(vectors: &[Vec<f64>], expected: usize) -> Result<(), ClusterError> {
    match vectors.iter().find(|v| v.len() != expected) {
        Some(v) => Err(ClusterError::DimensionMismatch {
            expected,
            got: v.len(),
        }),
        None => Ok(()),
    }
}

/// Cosine similarity; zero-norm vectors have similarity 0 with everything.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy clustering where "equivalent" means cosine >= `threshold`.
pub fn embedding_threshold_cluster(
    responses: &[ResponseTrace],
    embedder: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<Clustering, ClusterError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(ClusterError::Threshold(threshold));
    }
    if responses.is_empty() {
        return Err(ClusterError::Empty);
    }
    let texts: Vec<String> = responses.iter().map(|r| r.text.clone()).collect();
    let vectors = embedder.embed(&texts)?;
    if vectors.len() != texts.len() {
        return Err(ClusterError::VectorCount {
            expected: texts.len(),
            got: vectors.len(),
        });
    }
    check_dims(&vectors, vectors[0].len())?;
    // Identical vectors can land a hair below 1.0 after rounding.
    const COSINE_EPS: f64 = 1e-12;
    greedy(responses.len(), Strategy::Embedding, |rep, cand| {
        Ok(cosine(&vectors[rep], &vectors[cand]) + COSINE_EPS >= threshold)
    })
}

/// Guards a shared embedder against dimension drift across calls.
pub struct DimensionChecked<'a> {
    inner: &'a dyn EmbeddingProvider,
    dim: Mutex<Option<usize>>,
}

impl<'a> DimensionChecked<'a> {
    pub fn new(inner: &'a dyn EmbeddingProvider) -> Self {
        Self {
            inner,
            dim: Mutex::new(None),
        }
    }
}

impl EmbeddingProvider for DimensionChecked<'_> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ClusterError> {
        let vectors = self.inner.embed(texts)?;
        if let Some(first) = vectors.first() {
            let mut dim = self.dim.lock().expect("dimension lock poisoned");
            let expected = *dim.get_or_insert(first.len());
            check_dims(&vectors, expected)?;
        }
        Ok(vectors)
    }
}

/// A configured clustering backend.
#[derive(Clone, Copy)]
pub enum Clusterer<'a> {
    Exact,
    Entailment(&'a dyn EquivalenceOracle),
    Embedding {
        embedder: &'a dyn EmbeddingProvider,
        threshold: f64,
    },
}

impl Clusterer<'_> {
    pub fn strategy(&self) -> Strategy {
        match self {
            Clusterer::Exact => Strategy::Exact,
            Clusterer::Entailment(_) => Strategy::Entailment,
            Clusterer::Embedding { .. } => Strategy::Embedding,
        }
    }

    pub fn cluster(&self, question: &QuestionRecord) -> Result<Clustering, ClusterError> {
        match *self {
            Clusterer::Exact => exact_match_cluster(&question.responses),
            Clusterer::Entailment(oracle) => {
                greedy_entailment_cluster(&question.prompt, &question.responses, oracle)
            }
            Clusterer::Embedding {
                embedder,
                threshold,
            } => embedding_threshold_cluster(&question.responses, embedder, threshold),
        }
    }
}

/// Clusters each question independently; assignment within a question stays
/// sequential, so the result does not depend on `jobs`.
pub fn cluster_dataset(
    questions: &[QuestionRecord],
    clusterer: Clusterer<'_>,
    jobs: usize,
) -> Result<Vec<Clustering>, ClusterError> {
    crate::parallel::try_map_ordered(questions, jobs, |q| clusterer.cluster(q))
}
