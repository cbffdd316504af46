//! Logit trace data model and JSONL ingestion.
//!
//! One line of a trace file holds one [`QuestionRecord`]. Token-level fields
//! use short JSON keys (`logit`, `logprob`, `entropy`, `log_z`) and are
//! mapped onto descriptive struct fields here. Keys the toolkit does not know
//! about are kept in `extra` maps and written back out unchanged.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

/// Default tolerance for the `logprob == logit - log_z` consistency check.
pub const DEFAULT_CONSISTENCY_TOL: f64 = 1e-4;

/// Slack allowed above `ln |V|` for the entropy upper bound.
const ENTROPY_BOUND_SLACK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: {path} {problem}")]
    Schema {
        line: usize,
        path: String,
        problem: String,
    },
    #[error("line {line}: duplicate question_id {question_id:?}")]
    DuplicateQuestion { line: usize, question_id: String },
    #[error("response {response_id:?}: no scorable tokens")]
    NoScorableTokens { response_id: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl TraceError {
    /// Line number of the offending record, when the error came from parsing.
    pub fn line(&self) -> Option<usize> {
        match self {
            TraceError::Json { line, .. }
            | TraceError::Schema { line, .. }
            | TraceError::DuplicateQuestion { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// Correctness label of a sampled response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Correctness {
    Correct,
    Incorrect,
    Unjudged,
}

impl Correctness {
    pub fn from_option(value: Option<bool>) -> Self {
        match value {
            Some(true) => Correctness::Correct,
            Some(false) => Correctness::Incorrect,
            None => Correctness::Unjudged,
        }
    }

    pub fn as_option(self) -> Option<bool> {
        match self {
            Correctness::Correct => Some(true),
            Correctness::Incorrect => Some(false),
            Correctness::Unjudged => None,
        }
    }
}

impl Serialize for Correctness {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.as_option().serialize(serializer)
    }
}

/// One generated token and the logit statistics recorded for it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenTrace {
    #[serde(rename = "t")]
    pub text: String,
    #[serde(rename = "id")]
    pub token_id: u64,
    /// Raw pre-softmax score of the sampled token.
    #[serde(rename = "logit")]
    pub chosen_logit: f64,
    /// Natural-log probability of the sampled token.
    #[serde(rename = "logprob")]
    pub chosen_logprob: f64,
    /// Entropy (nats) of the full next-token distribution.
    #[serde(rename = "entropy")]
    pub full_entropy: f64,
    /// Log-sum-exp of the logits over the vocabulary at this position.
    #[serde(rename = "log_z")]
    pub position_log_z: f64,
    /// False for tokens inside reasoning spans.
    pub scored: bool,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResponseTrace {
    pub response_id: String,
    pub text: String,
    pub correct: Correctness,
    pub tokens: Vec<TokenTrace>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingMeta {
    pub n: u64,
    pub temperature: f64,
    pub top_p: f64,
    pub model: String,
    pub seed: Option<u64>,
    pub vocab_size: Option<u64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub prompt: String,
    pub gold_answers: Vec<String>,
    #[serde(rename = "sampling")]
    pub sampling_meta: SamplingMeta,
    pub responses: Vec<ResponseTrace>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Ordered collection of questions with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub questions: Vec<QuestionRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

impl ResponseTrace {
    /// Tokens that participate in scoring, in order. Fails when none remain.
    pub fn effective_tokens(&self) -> Result<Vec<&TokenTrace>, TraceError> {
        let kept: Vec<&TokenTrace> = self.tokens.iter().filter(|t| t.scored).collect();
        if kept.is_empty() {
            return Err(TraceError::NoScorableTokens {
                response_id: self.response_id.clone(),
            });
        }
        Ok(kept)
    }

    /// Number of scorable tokens (T_i).
    pub fn effective_len(&self) -> usize {
        self.tokens.iter().filter(|t| t.scored).count()
    }
}

/// Free-function form of [`ResponseTrace::effective_tokens`].
pub fn effective_tokens(response: &ResponseTrace) -> Result<Vec<&TokenTrace>, TraceError> {
    response.effective_tokens()
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// Streaming reader over a trace JSONL source. Holds at most one record.
pub struct TraceReader<R> {
    source: R,
    line_no: usize,
    buf: String,
    seen: HashSet<String>,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(source: R) -> Self {
        Self {
            source,
            line_no: 0,
            buf: String::new(),
            seen: HashSet::new(),
        }
    }

    /// Next raw non-blank line together with its 1-based line number.
    /// Lets callers parse lines on worker threads.
    pub fn next_line(&mut self) -> Option<Result<(usize, String), TraceError>> {
        loop {
            self.buf.clear();
            match self.source.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {
                    self.line_no += 1;
                    if self.buf.trim().is_empty() {
                        continue;
                    }
                    return Some(Ok((self.line_no, std::mem::take(&mut self.buf))));
                }
                Err(e) => return Some(Err(e.into())),
            }
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<QuestionRecord, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        let (line, text) = match self.next_line()? {
            Ok(v) => v,
            Err(e) => return Some(Err(e)),
        };
        let record = match parse_record_line(&text, line) {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        if !self.seen.insert(record.question_id.clone()) {
            return Some(Err(TraceError::DuplicateQuestion {
                line,
                question_id: record.question_id,
            }));
        }
        Some(Ok(record))
    }
}

/// Parse a whole trace stream into a [`Dataset`].
pub fn parse_trace_file<R: BufRead>(source: R) -> Result<Dataset, TraceError> {
    let questions = TraceReader::new(source).collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { questions })
}

/// Parse a trace stream, decoding lines on up to `jobs` threads in batches.
/// Memory is bounded by one batch; record order and errors match
/// [`parse_trace_file`].
pub fn parse_trace_file_jobs<R: BufRead>(source: R, jobs: usize) -> Result<Dataset, TraceError> {
    const BATCH: usize = 512;
    let mut reader = TraceReader::new(source);
    let mut questions = Vec::new();
    let mut batch: Vec<(usize, String)> = Vec::with_capacity(BATCH);
    loop {
        batch.clear();
        while batch.len() < BATCH {
            match reader.next_line() {
                Some(line) => batch.push(line?),
                None => break,
            }
        }
        if batch.is_empty() {
            break;
        }
        let parsed = crate::parallel::try_map_ordered(&batch, jobs, |(line, text)| {
            parse_record_line(text, *line)
        })?;
        for (record, (line, _)) in parsed.into_iter().zip(&batch) {
            if !reader.seen.insert(record.question_id.clone()) {
                return Err(TraceError::DuplicateQuestion {
                    line: *line,
                    question_id: record.question_id,
                });
            }
            questions.push(record);
        }
    }
    Ok(Dataset { questions })
}

/// Parse one JSONL line. `line` is only used for error reporting.
pub fn parse_record_line(text: &str, line: usize) -> Result<QuestionRecord, TraceError> {
    // Records with exactly the known keys decode straight into typed structs;
    // anything else (extra keys, bad input) goes through the generic path,
    // which keeps unknown keys and produces field-level errors.
    if let Ok(record) = serde_json::from_str::<strict::Question>(text) {
        return Ok(record.into());
    }
    let value: Value = serde_json::from_str(text).map_err(|e| TraceError::Json {
        line,
        message: e.to_string(),
    })?;
    question_from_value(value).map_err(|e| TraceError::Schema {
        line,
        path: e.path,
        problem: e.problem,
    })
}

mod strict {
    use serde::{Deserialize, Deserializer};
    use serde_json::Map;

    use super::{Correctness, QuestionRecord, ResponseTrace, SamplingMeta, TokenTrace};

    /// Present-but-nullable, unlike a plain `Option` field.
    fn nullable<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
        Option::<bool>::deserialize(d)
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub(super) struct Question {
        question_id: String,
        prompt: String,
        gold_answers: Vec<String>,
        sampling: Sampling,
        responses: Vec<Response>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Sampling {
        n: u64,
        temperature: f64,
        top_p: f64,
        model: String,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        vocab_size: Option<u64>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Response {
        response_id: String,
        text: String,
        #[serde(deserialize_with = "nullable")]
        correct: Option<bool>,
        tokens: Vec<Token>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Token {
        t: String,
        id: u64,
        logit: f64,
        logprob: f64,
        entropy: f64,
        log_z: f64,
        scored: bool,
    }

    impl From<Question> for QuestionRecord {
        fn from(q: Question) -> Self {
            let s = q.sampling;
            QuestionRecord {
                question_id: q.question_id,
                prompt: q.prompt,
                gold_answers: q.gold_answers,
                sampling_meta: SamplingMeta {
                    n: s.n,
                    temperature: s.temperature,
                    top_p: s.top_p,
                    model: s.model,
                    seed: s.seed,
                    vocab_size: s.vocab_size,
                    extra: Map::new(),
                },
                responses: q.responses.into_iter().map(Into::into).collect(),
                extra: Map::new(),
            }
        }
    }

    impl From<Response> for ResponseTrace {
        fn from(r: Response) -> Self {
            ResponseTrace {
                response_id: r.response_id,
                text: r.text,
                correct: Correctness::from_option(r.correct),
                tokens: r
                    .tokens
                    .into_iter()
                    .map(|t| TokenTrace {
                        text: t.t,
                        token_id: t.id,
                        chosen_logit: t.logit,
                        chosen_logprob: t.logprob,
                        full_entropy: t.entropy,
                        position_log_z: t.log_z,
                        scored: t.scored,
                        extra: Map::new(),
                    })
                    .collect(),
                extra: Map::new(),
            }
        }
    }
}

/// Schema violation found while walking a JSON value.
#[derive(Debug)]
struct FieldError {
    path: String,
    problem: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.path, self.problem)
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Wraps a JSON object while fields are taken out of it; whatever is left
/// over becomes the `extra` map.
struct Fields {
    path: String,
    map: Map<String, Value>,
}

impl Fields {
    fn new(value: Value, path: String) -> Result<Self, FieldError> {
        match value {
            Value::Object(map) => Ok(Self { path, map }),
            _ => Err(FieldError {
                path: if path.is_empty() { "<record>".into() } else { path },
                problem: "is not an object".into(),
            }),
        }
    }

    /// `key` is the JSON key; `name` is what error paths call the field.
    fn take(&mut self, key: &str, name: &str) -> Result<Value, FieldError> {
        self.map.remove(key).ok_or_else(|| FieldError {
            path: join(&self.path, name),
            problem: "missing".into(),
        })
    }

    fn wrong(&self, name: &str, expected: &str) -> FieldError {
        FieldError {
            path: join(&self.path, name),
            problem: format!("must be {expected}"),
        }
    }

    fn string(&mut self, key: &str, name: &str) -> Result<String, FieldError> {
        match self.take(key, name)? {
            Value::String(s) => Ok(s),
            _ => Err(self.wrong(name, "a string")),
        }
    }

    fn float(&mut self, key: &str, name: &str) -> Result<f64, FieldError> {
        match self.take(key, name)? {
            Value::Number(n) => n.as_f64().ok_or_else(|| self.wrong(name, "a number")),
            _ => Err(self.wrong(name, "a number")),
        }
    }

    fn uint(&mut self, key: &str, name: &str) -> Result<u64, FieldError> {
        match self.take(key, name)? {
            Value::Number(n) => n
                .as_u64()
                .ok_or_else(|| self.wrong(name, "a non-negative integer")),
            _ => Err(self.wrong(name, "a non-negative integer")),
        }
    }

    fn opt_uint(&mut self, key: &str) -> Result<Option<u64>, FieldError> {
        match self.map.remove(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::Number(n)) => n
                .as_u64()
                .map(Some)
                .ok_or_else(|| self.wrong(key, "a non-negative integer or null")),
            Some(_) => Err(self.wrong(key, "a non-negative integer or null")),
        }
    }

    fn boolean(&mut self, key: &str, name: &str) -> Result<bool, FieldError> {
        match self.take(key, name)? {
            Value::Bool(b) => Ok(b),
            _ => Err(self.wrong(name, "a boolean")),
        }
    }

    fn opt_bool(&mut self, key: &str) -> Result<Option<bool>, FieldError> {
        match self.take(key, key)? {
            Value::Null => Ok(None),
            Value::Bool(b) => Ok(Some(b)),
            _ => Err(self.wrong(key, "a boolean or null")),
        }
    }

    fn array(&mut self, key: &str, name: &str) -> Result<Vec<Value>, FieldError> {
        match self.take(key, name)? {
            Value::Array(items) => Ok(items),
            _ => Err(self.wrong(name, "an array")),
        }
    }

    fn finish(self) -> Map<String, Value> {
        self.map
    }
}

fn question_from_value(value: Value) -> Result<QuestionRecord, FieldError> {
    let mut f = Fields::new(value, String::new())?;
    let question_id = f.string("question_id", "question_id")?;
    let prompt = f.string("prompt", "prompt")?;
    let gold_answers = f
        .array("gold_answers", "gold_answers")?
        .into_iter()
        .enumerate()
        .map(|(i, v)| match v {
            Value::String(s) => Ok(s),
            _ => Err(FieldError {
                path: format!("gold_answers[{i}]"),
                problem: "must be a string".into(),
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sampling_meta = sampling_from_value(f.take("sampling", "sampling")?)?;
    let responses = f
        .array("responses", "responses")?
        .into_iter()
        .enumerate()
        .map(|(i, v)| response_from_value(v, format!("responses[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(QuestionRecord {
        question_id,
        prompt,
        gold_answers,
        sampling_meta,
        responses,
        extra: f.finish(),
    })
}

fn sampling_from_value(value: Value) -> Result<SamplingMeta, FieldError> {
    let mut f = Fields::new(value, "sampling".into())?;
    Ok(SamplingMeta {
        n: f.uint("n", "n")?,
        temperature: f.float("temperature", "temperature")?,
        top_p: f.float("top_p", "top_p")?,
        model: f.string("model", "model")?,
        seed: f.opt_uint("seed")?,
        vocab_size: f.opt_uint("vocab_size")?,
        extra: f.finish(),
    })
}

fn response_from_value(value: Value, path: String) -> Result<ResponseTrace, FieldError> {
    let mut f = Fields::new(value, path)?;
    let response_id = f.string("response_id", "response_id")?;
    let text = f.string("text", "text")?;
    let correct = Correctness::from_option(f.opt_bool("correct")?);
    let token_path = join(&f.path, "tokens");
    let tokens = f
        .array("tokens", "tokens")?
        .into_iter()
        .enumerate()
        .map(|(i, v)| token_from_value(v, format!("{token_path}[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ResponseTrace {
        response_id,
        text,
        correct,
        tokens,
        extra: f.finish(),
    })
}

fn token_from_value(value: Value, path: String) -> Result<TokenTrace, FieldError> {
    let mut f = Fields::new(value, path)?;
    Ok(TokenTrace {
        text: f.string("t", "text")?,
        token_id: f.uint("id", "token_id")?,
        chosen_logit: f.float("logit", "chosen_logit")?,
        chosen_logprob: f.float("logprob", "chosen_logprob")?,
        full_entropy: f.float("entropy", "full_entropy")?,
        position_log_z: f.float("log_z", "position_log_z")?,
        scored: f.boolean("scored", "scored")?,
        extra: f.finish(),
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// One JSONL line (no trailing newline). Floats use shortest round-trip form.
pub fn record_to_line(record: &QuestionRecord) -> String {
    serde_json::to_string(record).expect("trace records always serialize")
}

pub fn write_trace_file<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    for q in &dataset.questions {
        out.write_all(record_to_line(q).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EmptyResponses,
    CountMismatch,
    DuplicateResponseId,
    NoScorableTokens,
    NonFinite,
    PositiveLogprob,
    NegativeEntropy,
    EntropyAboveBound,
    Inconsistent,
}

/// A broken invariant, located by field path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Every invariant violation in `record`; empty means valid.
pub fn validate_question(record: &QuestionRecord, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, path: String, message: String| {
        out.push(Violation {
            kind,
            path,
            message,
        })
    };

    if record.responses.is_empty() {
        push(
            ViolationKind::EmptyResponses,
            "responses".into(),
            "no responses".into(),
        );
    }
    if record.sampling_meta.n != record.responses.len() as u64 {
        push(
            ViolationKind::CountMismatch,
            "sampling.n".into(),
            format!(
                "n = {} but {} responses present",
                record.sampling_meta.n,
                record.responses.len()
            ),
        );
    }
    let entropy_bound = record
        .sampling_meta
        .vocab_size
        .filter(|&v| v > 0)
        .map(|v| (v as f64).ln() + ENTROPY_BOUND_SLACK);

    let mut ids = HashSet::new();
    for (ri, response) in record.responses.iter().enumerate() {
        let rpath = format!("responses[{ri}]");
        if !ids.insert(response.response_id.as_str()) {
            push(
                ViolationKind::DuplicateResponseId,
                format!("{rpath}.response_id"),
                format!("duplicate response_id {:?}", response.response_id),
            );
        }
        if response.effective_len() == 0 {
            push(
                ViolationKind::NoScorableTokens,
                format!("{rpath}.tokens"),
                "no scorable tokens".into(),
            );
        }
        for (ti, tok) in response.tokens.iter().enumerate() {
            let tpath = format!("{rpath}.tokens[{ti}]");
            let fields = [
                ("chosen_logit", tok.chosen_logit),
                ("chosen_logprob", tok.chosen_logprob),
                ("full_entropy", tok.full_entropy),
                ("position_log_z", tok.position_log_z),
            ];
            let mut finite = true;
            for (name, v) in fields {
                if !v.is_finite() {
                    finite = false;
                    push(
                        ViolationKind::NonFinite,
                        format!("{tpath}.{name}"),
                        format!("{name} is not finite"),
                    );
                }
            }
            if !finite {
                continue;
            }
            if tok.chosen_logprob > 0.0 {
                push(
                    ViolationKind::PositiveLogprob,
                    format!("{tpath}.chosen_logprob"),
                    "chosen_logprob > 0".into(),
                );
            }
            if tok.full_entropy < 0.0 {
                push(
                    ViolationKind::NegativeEntropy,
                    format!("{tpath}.full_entropy"),
                    "full_entropy < 0".into(),
                );
            }
            if let Some(bound) = entropy_bound {
                if tok.full_entropy > bound {
                    push(
                        ViolationKind::EntropyAboveBound,
                        format!("{tpath}.full_entropy"),
                        format!("full_entropy {} > ln(vocab_size)", tok.full_entropy),
                    );
                }
            }
            let gap = (tok.chosen_logprob - (tok.chosen_logit - tok.position_log_z)).abs();
            if gap > tol {
                push(
                    ViolationKind::Inconsistent,
                    format!("{tpath}.chosen_logprob"),
                    format!("|logprob - (logit - log_z)| = {gap} > {tol}"),
                );
            }
        }
    }
    out
}

/// Non-fatal findings: responses whose text is empty or whitespace-only.
pub fn question_warnings(record: &QuestionRecord) -> Vec<String> {
    record
        .responses
        .iter()
        .enumerate()
        .filter(|(_, r)| r.text.trim().is_empty())
        .map(|(i, r)| {
            format!(
                "responses[{i}] ({}) has empty text; it clusters with every other empty response",
                r.response_id
            )
        })
        .collect()
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    const LINE: &str = r#"{"question_id":"q1","prompt":"Capital of France?","gold_answers":["Paris"],"sampling":{"n":2,"temperature":0.7,"top_p":0.9,"model":"m","seed":3,"vocab_size":null},"responses":[{"response_id":"r0","text":"Paris","correct":true,"tokens":[{"t":"Pa","id":1,"logit":10.0,"logprob":-2.0,"entropy":0.5,"log_z":12.0,"scored":true},{"t":"r","id":2,"logit":9.0,"logprob":-1.0,"entropy":0.1,"log_z":10.0,"scored":true},{"t":"is","id":3,"logit":8.5,"logprob":-0.5,"entropy":0.2,"log_z":9.0,"scored":true}]},{"response_id":"r1","text":"London","correct":false,"tokens":[{"t":"Lo","id":4,"logit":5.0,"logprob":-3.0,"entropy":1.5,"log_z":8.0,"scored":true},{"t":"nd","id":5,"logit":6.0,"logprob":-1.0,"entropy":0.7,"log_z":7.0,"scored":true},{"t":"on","id":6,"logit":7.0,"logprob":-0.25,"entropy":0.3,"log_z":7.25,"scored":true}]}]}"#;

    #[test]
    fn parses_one_record() {
        let ds = parse_trace_file(LINE.as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        let q = &ds.questions[0];
        assert_eq!(q.responses.len(), 2);
        assert_eq!(q.sampling_meta.n, 2);
        assert_eq!(q.responses[1].correct, Correctness::Incorrect);
        assert_eq!(q.responses[0].tokens[2].chosen_logit, 8.5);
        assert!(validate_question(q, DEFAULT_CONSISTENCY_TOL).is_empty());
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        assert!(parse_trace_file(&b""[..]).unwrap().is_empty());
        assert!(parse_trace_file(&b"\n\n"[..]).unwrap().is_empty());
    }

    #[test]
    fn missing_field_names_path() {
        let broken = LINE.replacen(r#""logit":9.0,"#, "", 1);
        let err = parse_trace_file(broken.as_bytes()).unwrap_err();
        assert_eq!(
            err.to_string(),
            "line 1: responses[0].tokens[1].chosen_logit missing"
        );
        assert_eq!(err.line(), Some(1));
    }

    #[test]
    fn typed_and_generic_decoding_agree() {
        let generic = |text: &str| question_from_value(serde_json::from_str(text).unwrap()).unwrap();
        let typed: QuestionRecord = serde_json::from_str::<strict::Question>(LINE).unwrap().into();
        assert_eq!(typed, generic(LINE));

        let no_correct = LINE.replacen(r#""correct":true,"#, "", 1);
        assert!(serde_json::from_str::<strict::Question>(&no_correct).is_err());
        assert_eq!(
            parse_record_line(&no_correct, 1).unwrap_err().to_string(),
            "line 1: responses[0].correct missing"
        );

        let no_seed = LINE.replacen(r#""seed":3,"#, "", 1);
        assert_eq!(parse_record_line(&no_seed, 1).unwrap(), generic(&no_seed));
    }

    #[test]
    fn malformed_json_reports_line() {
        let input = format!("{LINE}\n{}\n", &LINE[..40]);
        let err = parse_trace_file(input.as_bytes()).unwrap_err();
        assert!(matches!(err, TraceError::Json { line: 2, .. }), "{err}");
    }

    #[test]
    fn batched_parse_matches_streaming() {
        let other = LINE.replacen(r#""q1""#, r#""q2""#, 1);
        let input = format!("{LINE}\n\n{other}\n");
        let a = parse_trace_file(input.as_bytes()).unwrap();
        for jobs in [1, 4] {
            assert_eq!(parse_trace_file_jobs(input.as_bytes(), jobs).unwrap(), a);
        }
        let dup = format!("{LINE}\n{LINE}\n");
        assert!(matches!(
            parse_trace_file_jobs(dup.as_bytes(), 4),
            Err(TraceError::DuplicateQuestion { line: 2, .. })
        ));
        let broken = format!("{LINE}\n{{\n");
        assert!(matches!(parse_trace_file_jobs(broken.as_bytes(), 4), Err(TraceError::Json { line: 2, .. })));
    }

    #[test]
    fn duplicate_question_rejected() {
        let input = format!("{LINE}\n{LINE}\n");
        let err = parse_trace_file(input.as_bytes()).unwrap_err();
        assert!(matches!(err, TraceError::DuplicateQuestion { line: 2, .. }));
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let with_extra = LINE.replacen(r#""scored":true}"#, r#""scored":true,"top5":[1,2]}"#, 1);
        let with_extra = with_extra.replacen(r#""prompt""#, r#""source":"trivia","prompt""#, 1);
        let ds = parse_trace_file(with_extra.as_bytes()).unwrap();
        assert!(ds.questions[0].extra.contains_key("source"));
        assert!(ds.questions[0].responses[0].tokens[0].extra.contains_key("top5"));
        let mut buf = Vec::new();
        write_trace_file(&ds, &mut buf).unwrap();
        assert_eq!(parse_trace_file(&buf[..]).unwrap(), ds);
    }

    #[test]
    fn consistent_token_has_no_violation() {
        let q = question("q", vec![response("r", "a", vec![token(10.0, -2.0, 0.3, 12.0)])]);
        assert!(validate_question(&q, 1e-4).is_empty());
    }

    #[test]
    fn positive_logprob_flagged() {
        let q = question("q", vec![response("r", "a", vec![token(0.5, 0.5, 0.3, 0.0)])]);
        let v = validate_question(&q, 1e-4);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::PositiveLogprob);
        assert_eq!(v[0].message, "chosen_logprob > 0");
    }

    #[test]
    fn inconsistency_flagged() {
        let q = question("q", vec![response("r", "a", vec![token(10.0, -2.5, 0.3, 12.0)])]);
        let v = validate_question(&q, 1e-4);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::Inconsistent);
        assert!(v[0].message.starts_with("|logprob - (logit - log_z)| = 0.5 "));
    }

    #[test]
    fn entropy_bound_uses_vocab_size() {
        let mut q = question("q", vec![response("r", "a", vec![token(0.0, -1.0, 1.2, 1.0)])]);
        q.sampling_meta.vocab_size = Some(3);
        let v = validate_question(&q, 1e-4);
        assert_eq!(v[0].kind, ViolationKind::EntropyAboveBound);
        q.sampling_meta.vocab_size = Some(4);
        assert!(validate_question(&q, 1e-4).is_empty());
    }

    #[test]
    fn structural_violations() {
        let mut r = response("r", "a", vec![token(0.0, -1.0, 0.1, 1.0)]);
        r.tokens[0].scored = false;
        let mut q = question("q", vec![r.clone(), r]);
        q.sampling_meta.n = 3;
        let kinds: Vec<_> = validate_question(&q, 1e-4).into_iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::CountMismatch));
        assert!(kinds.contains(&ViolationKind::DuplicateResponseId));
        assert!(kinds.contains(&ViolationKind::NoScorableTokens));

        let empty = question("q", vec![]);
        let kinds: Vec<_> = validate_question(&empty, 1e-4).into_iter().map(|v| v.kind).collect();
        assert_eq!(kinds, vec![ViolationKind::EmptyResponses]);
    }

    #[test]
    fn whitespace_text_warns() {
        let q = question("q", vec![response("r", "  ", vec![token(0.0, -1.0, 0.1, 1.0)])]);
        assert_eq!(question_warnings(&q).len(), 1);
    }

    #[test]
    fn effective_tokens_filters() {
        let all = response("r", "a", (0..5).map(|_| token(1.0, -1.0, 0.1, 2.0)).collect());
        assert_eq!(all.effective_tokens().unwrap().len(), 5);

        let mut mixed = response("r", "a", (0..8).map(|i| token(i as f64, -1.0, 0.1, i as f64 + 1.0)).collect());
        for t in &mut mixed.tokens[..6] {
            t.scored = false;
        }
        let kept = mixed.effective_tokens().unwrap();
        assert_eq!(kept.iter().map(|t| t.chosen_logit).collect::<Vec<_>>(), vec![6.0, 7.0]);

        for t in &mut mixed.tokens {
            t.scored = false;
        }
        assert_eq!(
            mixed.effective_tokens().unwrap_err().to_string(),
            "response \"r\": no scorable tokens"
        );
    }
}
