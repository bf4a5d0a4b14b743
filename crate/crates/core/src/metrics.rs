//! Evaluation metrics over per-sample decisions: fractional accuracy,
//! abstain-covered coverage, set size, AUROC, AUARC and ECE.
//!
//! Ranking metrics use max-softmax confidence. A set decision counts as
//! correct for AUROC/AUARC when it contains the truth. Abstentions are left
//! out of AUROC and ECE and are rejected first (ranked last) in AUARC; both
//! conventions can be changed through [`ReportOptions`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::Decision;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no samples")]
    Empty,
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("number of bins must be at least 1")]
    ZeroBins,
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
}

/// One evaluated test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub decision: Decision,
    pub label: usize,
    /// Max softmax probability of the sample.
    pub confidence: f64,
}

impl EvalOutcome {
    /// Truth named by the decision (abstentions are never correct).
    pub fn correct(&self) -> bool {
        self.decision.contains(self.label)
    }

    /// 1 for a correct single, `1/|set|` for a set holding the truth, else 0.
    pub fn fractional_credit(&self) -> f64 {
        match &self.decision {
            Decision::Single(y) => f64::from(u8::from(*y == self.label)),
            Decision::Set(set) if set.contains(&self.label) => 1.0 / set.len() as f64,
            _ => 0.0,
        }
    }

    /// Whether the truth is not excluded: correct, or abstained.
    pub fn covered(&self) -> bool {
        self.decision.is_abstain() || self.correct()
    }
}

/// Mean fractional credit over answered samples; 0 when everything abstained.
pub fn fractional_accuracy(outcomes: &[EvalOutcome]) -> f64 {
    let (sum, answered) = outcomes
        .iter()
        .filter(|o| !o.decision.is_abstain())
        .fold((0.0, 0usize), |(s, n), o| {
            (s + o.fractional_credit(), n + 1)
        });
    if answered == 0 {
        0.0
    } else {
        sum / answered as f64
    }
}

pub fn eval_coverage(outcomes: &[EvalOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.covered()).count() as f64 / outcomes.len() as f64
}

/// Mean set size over set decisions only; 0 when there are none.
pub fn avg_set_size(outcomes: &[EvalOutcome]) -> f64 {
    let (total, count) = outcomes
        .iter()
        .filter_map(|o| match &o.decision {
            Decision::Set(s) => Some(s.len()),
            _ => None,
        })
        .fold((0usize, 0usize), |(t, c), len| (t + len, c + 1));
    if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    }
}

pub fn abstention_rate(outcomes: &[EvalOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.decision.is_abstain()).count() as f64 / outcomes.len() as f64
}

fn check_lengths(
    confidences: &[f64],
    other: usize,
    what: &'static str,
) -> Result<(), MetricsError> {
    if confidences.is_empty() {
        return Err(MetricsError::Empty);
    }
    if confidences.len() != other {
        return Err(MetricsError::LengthMismatch {
            what,
            expected: confidences.len(),
            got: other,
        });
    }
    Ok(())
}

/// Mann-Whitney AUROC of correct vs incorrect samples by confidence, ties
/// scored one half. `None` when either class is absent.
pub fn auroc(confidences: &[f64], correct: &[bool]) -> Result<Option<f64>, MetricsError> {
    check_lengths(confidences, correct.len(), "correctness flags")?;
    let n_pos = correct.iter().filter(|&&c| c).count() as u128;
    let n_neg = correct.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]));

    // Twice the U statistic, kept integral so the result is exact.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && confidences[order[j]] == confidences[order[i]] {
            if correct[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(Some(twice_u as f64 / (2 * n_pos * n_neg) as f64))
}

/// Indices by descending confidence, ties by input index. Entries flagged in
/// `rank_last` follow every unflagged entry, in the same internal order.
pub fn rejection_order(confidences: &[f64], rank_last: Option<&[bool]>) -> Vec<usize> {
    let last = |i: usize| rank_last.is_some_and(|flags| flags[i]);
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| {
        last(a)
            .cmp(&last(b))
            .then(confidences[b].total_cmp(&confidences[a]))
            .then(a.cmp(&b))
    });
    order
}

/// Mean over `k = 1..n` of the accuracy of the first `k` entries.
pub fn auarc_in_order(correct_in_order: &[bool]) -> Result<f64, MetricsError> {
    if correct_in_order.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut hits = 0usize;
    let mut area = 0.0;
    for (k, &c) in correct_in_order.iter().enumerate() {
        hits += usize::from(c);
        area += hits as f64 / (k + 1) as f64;
    }
    Ok(area / correct_in_order.len() as f64)
}

/// Accuracy-rejection area: samples are retained most-confident first.
pub fn auarc(confidences: &[f64], correct: &[bool]) -> Result<f64, MetricsError> {
    check_lengths(confidences, correct.len(), "correctness flags")?;
    let order = rejection_order(confidences, None);
    auarc_in_order(&order.iter().map(|&i| correct[i]).collect::<Vec<_>>())
}

/// Bin `b` covers `[b/B, (b+1)/B)`; the last bin is closed on the right.
pub fn bin_edges(n_bins: usize) -> Vec<f64> {
    (0..=n_bins).map(|b| b as f64 / n_bins as f64).collect()
}

fn bin_index(confidence: f64, edges: &[f64]) -> usize {
    let n_bins = edges.len() - 1;
    let mut idx = ((confidence * n_bins as f64) as usize).min(n_bins - 1);
    while idx > 0 && confidence < edges[idx] {
        idx -= 1;
    }
    while idx + 1 < n_bins && confidence >= edges[idx + 1] {
        idx += 1;
    }
    idx
}

/// Expected calibration error with equal-width bins. `accuracy` holds the
/// per-sample credit (0/1 flags or fractional values). Empty bins add 0.
pub fn ece(confidences: &[f64], accuracy: &[f64], n_bins: usize) -> Result<f64, MetricsError> {
    check_lengths(confidences, accuracy.len(), "accuracy values")?;
    if n_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    if let Some(&c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(MetricsError::ConfidenceOutOfRange(c));
    }
    let edges = bin_edges(n_bins);
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut acc_sum = vec![0.0; n_bins];
    for (&c, &a) in confidences.iter().zip(accuracy) {
        let b = bin_index(c, &edges);
        count[b] += 1;
        conf_sum[b] += c;
        acc_sum[b] += a;
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        if count[b] > 0 {
            let m = count[b] as f64;
            total += (m / n) * (acc_sum[b] / m - conf_sum[b] / m).abs();
        }
    }
    Ok(total)
}

/// How abstentions enter a ranking metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstainHandling {
    Exclude,
    /// Kept as incorrect and rejected before any answered sample.
    RankLast,
}

/// Per-sample credit fed to ECE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationCredit {
    /// 1 when the output names the truth.
    Membership,
    /// 1 for a correct single, `1/|set|` for a set holding the truth.
    Fractional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub method: String,
    pub dataset: String,
    pub n_bins: usize,
    pub auroc_abstain: AbstainHandling,
    pub auarc_abstain: AbstainHandling,
    pub ece_credit: CalibrationCredit,
}

impl ReportOptions {
    pub const DEFAULT_BINS: usize = 10;

    pub fn new(method: impl Into<String>, dataset: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            dataset: dataset.into(),
            n_bins: Self::DEFAULT_BINS,
            auroc_abstain: AbstainHandling::Exclude,
            auarc_abstain: AbstainHandling::RankLast,
            ece_credit: CalibrationCredit::Fractional,
        }
    }
}

/// One comparison-table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub method: String,
    pub dataset: String,
    pub n: usize,
    pub accuracy: f64,
    pub coverage: f64,
    pub avg_set_size: f64,
    pub abstention_rate: f64,
    /// `null` when the scored samples are all correct or all wrong.
    pub auroc: Option<f64>,
    pub auarc: f64,
    pub ece: f64,
}

impl MetricsReport {
    /// Column order shared by the JSON, CSV and Markdown projections.
    pub const COLUMNS: [&'static str; 10] = [
        "method",
        "dataset",
        "n",
        "accuracy",
        "coverage",
        "avg_set_size",
        "abstention_rate",
        "auroc",
        "auarc",
        "ece",
    ];
}

fn ranked_inputs(
    outcomes: &[EvalOutcome],
    handling: AbstainHandling,
) -> (Vec<f64>, Vec<bool>, Vec<bool>) {
    let kept: Vec<&EvalOutcome> = outcomes
        .iter()
        .filter(|o| handling == AbstainHandling::RankLast || !o.decision.is_abstain())
        .collect();
    (
        kept.iter().map(|o| o.confidence).collect(),
        kept.iter().map(|o| o.correct()).collect(),
        kept.iter().map(|o| o.decision.is_abstain()).collect(),
    )
}

pub fn full_report(
    outcomes: &[EvalOutcome],
    options: &ReportOptions,
) -> Result<MetricsReport, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    if options.n_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }

    let (conf, correct, _) = ranked_inputs(outcomes, options.auroc_abstain);
    let auroc_value = if conf.is_empty() {
        None
    } else {
        auroc(&conf, &correct)?
    };

    let (conf, correct, last) = ranked_inputs(outcomes, options.auarc_abstain);
    let auarc_value = if conf.is_empty() {
        0.0
    } else {
        let order = rejection_order(&conf, Some(&last));
        auarc_in_order(&order.iter().map(|&i| correct[i]).collect::<Vec<_>>())?
    };

    let answered: Vec<&EvalOutcome> = outcomes
        .iter()
        .filter(|o| !o.decision.is_abstain())
        .collect();
    let ece_value = if answered.is_empty() {
        0.0
    } else {
        let conf: Vec<f64> = answered.iter().map(|o| o.confidence).collect();
        let credit: Vec<f64> = answered
            .iter()
            .map(|o| match options.ece_credit {
                CalibrationCredit::Membership => f64::from(u8::from(o.correct())),
                CalibrationCredit::Fractional => o.fractional_credit(),
            })
            .collect();
        ece(&conf, &credit, options.n_bins)?
    };

    Ok(MetricsReport {
        method: options.method.clone(),
        dataset: options.dataset.clone(),
        n: outcomes.len(),
        accuracy: fractional_accuracy(outcomes),
        coverage: eval_coverage(outcomes),
        avg_set_size: avg_set_size(outcomes),
        abstention_rate: abstention_rate(outcomes),
        auroc: auroc_value,
        auarc: auarc_value,
        ece: ece_value,
    })
}
