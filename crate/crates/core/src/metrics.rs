//! Detection metrics for uncertainty scores.
//!
//! The positive class is always a *correct* response, and items are ranked
//! by ascending uncertainty. Tied scores are handled as one block: AUROC
//! gives half credit to tied positive/negative pairs, and the PR and
//! threshold sweeps move past a whole tie group at once.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::Clustering;
use crate::scoring::{Method, ScoreRow};
use crate::trace::QuestionRecord;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("undefined AUROC: need at least one correct and one incorrect item")]
    UndefinedAuroc,
    #[error("undefined AUPR: no correct items")]
    NoPositives,
    #[error("undefined FPR: need at least one correct and one incorrect item")]
    UndefinedFpr,
    #[error("non-finite score at item {0}")]
    NonFinite(usize),
    #[error("target TPR must lie in (0, 1], got {0}")]
    TargetTpr(f64),
    #[error("unjudged responses present: {0}")]
    Unjudged(String),
    #[error("method {method} missing from score row {row}")]
    MissingMethod { method: Method, row: String },
}

/// One response's uncertainty (higher = less reliable) and its label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledScore {
    pub score: f64,
    pub correct: bool,
}

impl LabeledScore {
    pub fn new(score: f64, correct: bool) -> Self {
        Self { score, correct }
    }
}

/// Positive and negative counts of one block of tied scores.
#[derive(Debug, Clone, Copy)]
struct TieGroup {
    score: f64,
    pos: u64,
    neg: u64,
}

fn check_finite(items: &[LabeledScore]) -> Result<(), MetricError> {
    match items.iter().position(|i| !i.score.is_finite()) {
        Some(idx) => Err(MetricError::NonFinite(idx)),
        None => Ok(()),
    }
}

/// Tie groups in ascending score order plus total positives and negatives.
fn tie_groups(items: &[LabeledScore]) -> (Vec<TieGroup>, u64, u64) {
    let mut sorted: Vec<&LabeledScore> = items.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut groups: Vec<TieGroup> = Vec::new();
    for item in sorted {
        match groups.last_mut() {
            Some(g) if g.score == item.score => {
                if item.correct {
                    g.pos += 1
                } else {
                    g.neg += 1
                }
            }
            _ => groups.push(TieGroup {
                score: item.score,
                pos: item.correct as u64,
                neg: (!item.correct) as u64,
            }),
        }
    }
    let pos = groups.iter().map(|g| g.pos).sum();
    let neg = groups.iter().map(|g| g.neg).sum();
    (groups, pos, neg)
}

/// Probability that a random correct item has lower uncertainty than a
/// random incorrect one, ties counted half (Mann-Whitney U / (P N)).
pub fn auroc(items: &[LabeledScore]) -> Result<f64, MetricError> {
    check_finite(items)?;
    let (groups, pos, neg) = tie_groups(items);
    if pos == 0 || neg == 0 {
        return Err(MetricError::UndefinedAuroc);
    }
    // Twice the U statistic keeps the sum integral.
    let mut neg_seen = 0u64;
    let mut twice_u = 0u64;
    for g in &groups {
        let neg_above = neg - neg_seen - g.neg;
        twice_u += g.pos * (2 * neg_above + g.neg);
        neg_seen += g.neg;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Step-wise average precision with correct items as positives, ranked by
/// ascending uncertainty.
pub fn aupr(items: &[LabeledScore]) -> Result<f64, MetricError> {
    check_finite(items)?;
    let (groups, pos, _) = tie_groups(items);
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let (mut tp, mut seen) = (0u64, 0u64);
    let mut ap = 0.0;
    for g in &groups {
        tp += g.pos;
        seen += g.pos + g.neg;
        if g.pos > 0 {
            ap += (g.pos as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// Fraction of incorrect items at or below the smallest observed
/// uncertainty cutoff that admits at least `target_tpr` of correct items.
pub fn fpr_at_tpr(items: &[LabeledScore], target_tpr: f64) -> Result<f64, MetricError> {
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(MetricError::TargetTpr(target_tpr));
    }
    check_finite(items)?;
    let (groups, pos, neg) = tie_groups(items);
    if pos == 0 || neg == 0 {
        return Err(MetricError::UndefinedFpr);
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    for g in &groups {
        tp += g.pos;
        fp += g.neg;
        if tp as f64 / pos as f64 >= target_tpr {
            return Ok(fp as f64 / neg as f64);
        }
    }
    unreachable!("the last group admits every positive")
}

pub fn fpr95(items: &[LabeledScore]) -> Result<f64, MetricError> {
    fpr_at_tpr(items, 0.95)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// ROC points at every distinct cutoff, starting from (0, 0).
pub fn roc_curve(items: &[LabeledScore]) -> Result<Vec<RocPoint>, MetricError> {
    check_finite(items)?;
    let (groups, pos, neg) = tie_groups(items);
    if pos == 0 || neg == 0 {
        return Err(MetricError::UndefinedAuroc);
    }
    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for g in &groups {
        tp += g.pos;
        fp += g.neg;
        points.push(RocPoint {
            threshold: g.score,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Precision/recall at every distinct cutoff.
pub fn pr_curve(items: &[LabeledScore]) -> Result<Vec<PrPoint>, MetricError> {
    check_finite(items)?;
    let (groups, pos, _) = tie_groups(items);
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let (mut tp, mut seen) = (0u64, 0u64);
    Ok(groups
        .iter()
        .map(|g| {
            tp += g.pos;
            seen += g.pos + g.neg;
            PrPoint {
                threshold: g.score,
                recall: tp as f64 / pos as f64,
                precision: tp as f64 / seen as f64,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Dataset-level evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    #[default]
    All,
    #[serde(alias = "single-cluster")]
    SingleCluster,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::SingleCluster => "single_cluster",
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Subset::All),
            "single-cluster" | "single_cluster" => Ok(Subset::SingleCluster),
            other => Err(format!("unknown subset {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Every sampled response is one labeled item.
    #[default]
    Response,
    /// One item per question: the first member of its largest cluster.
    Question,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Response => "response",
            Granularity::Question => "question",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "response" => Ok(Granularity::Response),
            "question" => Ok(Granularity::Question),
            other => Err(format!("unknown granularity {other:?}")),
        }
    }
}

/// Questions whose responses all landed in a single cluster.
pub fn single_cluster_subset<'a>(
    questions: &'a [QuestionRecord],
    clusterings: &[Clustering],
) -> Vec<&'a QuestionRecord> {
    questions
        .iter()
        .zip(clusterings)
        .filter(|(_, c)| c.k == 1)
        .map(|(q, _)| q)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub positives: usize,
    pub negatives: usize,
}

/// Metric triple for one method. `None` where the metric is undefined
/// for the evaluated items (e.g. every item correct).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub fpr95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subset: Subset,
    pub granularity: Granularity,
    pub counts: Counts,
    pub methods: Vec<MethodMetrics>,
}

impl MetricsReport {
    pub fn get(&self, method: Method) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Rows kept by `subset` under `granularity`, in input order.
pub fn select_rows(rows: &[ScoreRow], subset: Subset, granularity: Granularity) -> Vec<&ScoreRow> {
    let kept = rows.iter().filter(|r| match subset {
        Subset::All => true,
        Subset::SingleCluster => r.k == 1,
    });
    match granularity {
        Granularity::Response => kept.collect(),
        Granularity::Question => {
            let mut order: Vec<&str> = Vec::new();
            let mut by_question: HashMap<&str, Vec<&ScoreRow>> = HashMap::new();
            for r in kept {
                let entry = by_question.entry(r.question_id.as_str()).or_default();
                if entry.is_empty() {
                    order.push(r.question_id.as_str());
                }
                entry.push(r);
            }
            order
                .into_iter()
                .map(|qid| majority_representative(&by_question[qid]))
                .collect()
        }
    }
}

fn majority_representative<'a>(rows: &[&'a ScoreRow]) -> &'a ScoreRow {
    let k = rows.iter().map(|r| r.cluster + 1).max().unwrap_or(1);
    let mut sizes = vec![0usize; k];
    for r in rows {
        sizes[r.cluster] += 1;
    }
    // Largest cluster; lowest index on ties.
    let best = sizes
        .iter()
        .enumerate()
        .fold(0, |best, (c, &s)| if s > sizes[best] { c } else { best });
    rows.iter()
        .find(|r| r.cluster == best)
        .copied()
        .expect("majority cluster has a member")
}

/// Labeled items for one method, oriented as uncertainty.
pub fn labeled_items(rows: &[&ScoreRow], method: Method) -> Result<Vec<LabeledScore>, MetricError> {
    rows.iter()
        .map(|r| {
            let score = r.score(method).ok_or_else(|| MetricError::MissingMethod {
                method,
                row: format!("{}/{}", r.question_id, r.response_id),
            })?;
            let correct = r
                .correct
                .ok_or_else(|| MetricError::Unjudged(format!("{}/{}", r.question_id, r.response_id)))?;
            Ok(LabeledScore::new(method.uncertainty(score), correct))
        })
        .collect()
}

/// AUROC, AUPR and FPR95 for each method over the selected rows.
pub fn evaluate(
    rows: &[ScoreRow],
    subset: Subset,
    granularity: Granularity,
    methods: &[Method],
) -> Result<MetricsReport, MetricError> {
    let selected = select_rows(rows, subset, granularity);
    let unjudged: Vec<String> = selected
        .iter()
        .filter(|r| r.correct.is_none())
        .map(|r| format!("{}/{}", r.question_id, r.response_id))
        .collect();
    if !unjudged.is_empty() {
        return Err(MetricError::Unjudged(unjudged.join(", ")));
    }
    let positives = selected.iter().filter(|r| r.correct == Some(true)).count();
    let counts = Counts {
        total: selected.len(),
        positives,
        negatives: selected.len() - positives,
    };
    let per_method = methods
        .iter()
        .map(|&method| {
            let items = labeled_items(&selected, method)?;
            Ok(MethodMetrics {
                method,
                auroc: defined(auroc(&items))?,
                aupr: defined(aupr(&items))?,
                fpr95: defined(fpr95(&items))?,
            })
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    Ok(MetricsReport {
        subset,
        granularity,
        counts,
        methods: per_method,
    })
}

/// Undefined-by-class-balance becomes `None`; other errors propagate.
fn defined(result: Result<f64, MetricError>) -> Result<Option<f64>, MetricError> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::UndefinedAuroc | MetricError::UndefinedFpr | MetricError::NoPositives) => {
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn items(correct: &[f64], incorrect: &[f64]) -> Vec<LabeledScore> {
        correct
            .iter()
            .map(|&s| LabeledScore::new(s, true))
            .chain(incorrect.iter().map(|&s| LabeledScore::new(s, false)))
            .collect()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&items(&[0.1, 0.4], &[0.35, 0.8])).unwrap(), 0.75);
        assert_eq!(auroc(&items(&[0.1, 0.2], &[0.3, 0.8])).unwrap(), 1.0);
        assert_eq!(auroc(&items(&[0.0, 0.0, 0.0], &[0.0, 0.0])).unwrap(), 0.5);
        assert_eq!(auroc(&items(&[0.1], &[])), Err(MetricError::UndefinedAuroc));
        assert_eq!(
            MetricError::UndefinedAuroc.to_string(),
            "undefined AUROC: need at least one correct and one incorrect item"
        );
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&items(&[0.1, 0.2], &[0.3, 0.8])).unwrap(), 1.0);
        assert_eq!(aupr(&items(&[1.0, 1.0, 1.0], &[1.0, 1.0])).unwrap(), 0.6);
        let ap = aupr(&items(&[0.1, 0.4], &[0.35, 0.8])).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-9);
        assert_eq!(aupr(&items(&[], &[0.3])), Err(MetricError::NoPositives));
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr95(&items(&[0.1, 0.2], &[0.3, 0.8])).unwrap(), 0.0);
        assert_eq!(fpr95(&items(&[2.0, 2.0], &[2.0, 2.0, 2.0])).unwrap(), 1.0);
        assert_eq!(fpr95(&items(&[1.0, 2.0, 3.0, 4.0], &[2.5, 9.0])).unwrap(), 0.5);
        assert!(matches!(fpr_at_tpr(&items(&[1.0], &[2.0]), 0.0), Err(MetricError::TargetTpr(_))));
        assert_eq!(fpr95(&items(&[1.0], &[])), Err(MetricError::UndefinedFpr));
    }

    #[test]
    fn non_finite_rejected() {
        assert_eq!(auroc(&items(&[f64::NAN], &[1.0])), Err(MetricError::NonFinite(0)));
    }

    #[test]
    fn curves() {
        let xs = items(&[0.1, 0.4], &[0.35, 0.8]);
        let roc = roc_curve(&xs).unwrap();
        assert_eq!(roc.len(), 5);
        assert_eq!((roc[4].fpr, roc[4].tpr), (1.0, 1.0));
        let pr = pr_curve(&xs).unwrap();
        assert_eq!(pr.len(), 4);
        assert_eq!((pr[0].recall, pr[0].precision), (0.5, 1.0));
    }

    fn row(q: &str, r: &str, cluster: usize, k: usize, correct: Option<bool>, u: f64) -> ScoreRow {
        let mut scores = BTreeMap::new();
        scores.insert(Method::SemanticEnergy, u);
        scores.insert(Method::SemanticEntropy, if k == 1 { 0.0 } else { 0.5 });
        ScoreRow {
            question_id: q.into(),
            response_id: r.into(),
            cluster,
            k,
            correct,
            scores,
        }
    }

    #[test]
    fn single_cluster_subset_filters_rows() {
        let rows = vec![
            row("a", "0", 0, 1, Some(true), -15.0),
            row("a", "1", 0, 1, Some(true), -15.0),
            row("b", "0", 0, 1, Some(false), -8.0),
            row("c", "0", 0, 2, Some(false), -3.0),
            row("c", "1", 1, 2, Some(true), -2.0),
        ];
        let report = evaluate(
            &rows,
            Subset::SingleCluster,
            Granularity::Response,
            &[Method::SemanticEntropy, Method::SemanticEnergy],
        )
        .unwrap();
        assert_eq!(report.counts, Counts { total: 3, positives: 2, negatives: 1 });
        let se = report.get(Method::SemanticEntropy).unwrap();
        assert_eq!((se.auroc, se.fpr95), (Some(0.5), Some(1.0)));
        assert!((se.aupr.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.get(Method::SemanticEnergy).unwrap().auroc, Some(1.0));
    }

    #[test]
    fn question_granularity_uses_majority_cluster() {
        let rows = vec![
            row("a", "0", 0, 2, Some(false), 1.0),
            row("a", "1", 1, 2, Some(true), 2.0),
            row("a", "2", 1, 2, Some(true), 2.0),
            row("b", "0", 0, 2, Some(false), 5.0),
            row("b", "1", 1, 2, Some(true), 0.0),
        ];
        let picked = select_rows(&rows, Subset::All, Granularity::Question);
        let ids: Vec<_> = picked.iter().map(|r| (r.question_id.as_str(), r.response_id.as_str())).collect();
        assert_eq!(ids, vec![("a", "1"), ("b", "0")]);
    }

    #[test]
    fn unjudged_rows_listed() {
        let rows = vec![row("a", "0", 0, 1, None, 1.0), row("a", "1", 0, 1, Some(true), 1.0)];
        let err = evaluate(&rows, Subset::All, Granularity::Response, &[Method::SemanticEnergy]).unwrap_err();
        assert_eq!(err, MetricError::Unjudged("a/0".into()));
    }

    #[test]
    fn one_class_gives_none() {
        let rows = vec![row("a", "0", 0, 1, Some(true), 1.0)];
        let report = evaluate(&rows, Subset::All, Granularity::Response, &[Method::SemanticEnergy]).unwrap();
        let m = report.get(Method::SemanticEnergy).unwrap();
        assert_eq!((m.auroc, m.aupr, m.fpr95), (None, Some(1.0), None));
    }

    #[test]
    fn oracle_score_is_perfect() {
        let rows: Vec<ScoreRow> = (0..10)
            .map(|i| {
                let correct = i % 3 == 0;
                row("q", &i.to_string(), 0, 1, Some(correct), -(correct as u8 as f64))
            })
            .collect();
        let report = evaluate(&rows, Subset::All, Granularity::Response, &[Method::SemanticEnergy]).unwrap();
        assert_eq!(report.methods[0].auroc, Some(1.0));
    }

    #[test]
    fn subset_of_questions() {
        use crate::clustering::Strategy;
        use crate::trace::fixtures::question;
        let qs: Vec<QuestionRecord> = (0..7).map(|i| question(&format!("q{i}"), vec![])).collect();
        let cs: Vec<Clustering> = (0..7)
            .map(|i| Clustering {
                assignments: vec![],
                k: if [1, 4, 6].contains(&i) { 1 } else { 2 },
                strategy: Strategy::Exact,
            })
            .collect();
        let ids: Vec<_> = single_cluster_subset(&qs, &cs).iter().map(|q| q.question_id.clone()).collect();
        assert_eq!(ids, vec!["q1", "q4", "q6"]);
    }
}
