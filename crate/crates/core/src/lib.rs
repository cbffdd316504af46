//! Semantic entropy and semantic energy uncertainty scores for sampled LLM
//! responses, computed from recorded per-token logit traces, plus the
//! metrics used to judge how well each score flags incorrect answers.
//!
//! The modules follow the data flow: [`trace`] parses and validates trace
//! files, [`clustering`] groups responses by meaning, [`scoring`] turns
//! traces and clusters into uncertainty scores, and [`metrics`] evaluates
//! those scores against correctness labels. [`synth`] generates traces with
//! known ground truth.

pub mod clustering;
pub mod metrics;
pub mod parallel;
pub mod scoring;
pub mod synth;
pub mod trace;

pub use clustering::{Clusterer, Clustering, Strategy};
pub use metrics::{Granularity, LabeledScore, MetricsReport, Subset};
pub use scoring::{Method, ScoreConfig, ScoreRow};
pub use trace::{Dataset, QuestionRecord, ResponseTrace, TokenTrace};
