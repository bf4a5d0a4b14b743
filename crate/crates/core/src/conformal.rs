//! Split-conformal scoring, the finite-sample quantile and the LAC / APS
//! set constructors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{argmax, RecordSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConformalError {
    #[error("score list is empty")]
    EmptyScores,
    #[error("score {index} is {value}, outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("miscoverage must lie in (0, 1), got {0}")]
    InvalidMiscoverage(f64),
}

/// Calibration nonconformity scores. Keeps input order and a sorted copy so
/// repeated quantile queries are O(1).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreList {
    scores: Vec<f64>,
    sorted: Vec<f64>,
}

impl ScoreList {
    pub fn new(scores: Vec<f64>) -> Result<Self, ConformalError> {
        if scores.is_empty() {
            return Err(ConformalError::EmptyScores);
        }
        if let Some((index, &value)) = scores
            .iter()
            .enumerate()
            .find(|(_, s)| !(0.0..=1.0).contains(*s))
        {
            return Err(ConformalError::ScoreOutOfRange { index, value });
        }
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { scores, sorted })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// A conformal cutoff. `all_inclusive` marks the case where the adjusted rank
/// runs past the calibration set, in which case every candidate passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub all_inclusive: bool,
}

impl Threshold {
    pub fn at(value: f64) -> Self {
        Self {
            value,
            all_inclusive: false,
        }
    }

    pub fn all_inclusive() -> Self {
        Self {
            value: 1.0,
            all_inclusive: true,
        }
    }

    /// Whether a candidate with nonconformity `score` falls inside the set.
    /// Ties at the cutoff are admitted.
    pub fn admits(&self, score: f64) -> bool {
        self.all_inclusive || score <= self.value
    }

    /// Total order used by nesting arguments: all-inclusive sits above every
    /// finite cutoff.
    pub fn le(&self, other: &Threshold) -> bool {
        other.all_inclusive || (!self.all_inclusive && self.value <= other.value)
    }
}

/// `1 - p[label]` per calibration record, in record order.
pub fn calibration_scores(records: &RecordSet) -> Result<ScoreList, ConformalError> {
    ScoreList::new(
        records
            .iter()
            .map(|r| lac_score(r.probs(), r.label()))
            .collect(),
    )
}

/// APS calibration scores: cumulative descending mass through the true label.
pub fn aps_calibration_scores(records: &RecordSet) -> Result<ScoreList, ConformalError> {
    ScoreList::new(
        records
            .iter()
            .map(|r| aps_score(r.probs(), r.label()).min(1.0))
            .collect(),
    )
}

/// Rank `ceil((n + 1)(1 - miscoverage))`, 1-based.
pub fn adjusted_rank(n: usize, miscoverage: f64) -> usize {
    // The epsilon absorbs representation error such as 10 * 0.9 landing just
    // above 9.
    let raw = ((n as f64 + 1.0) * (1.0 - miscoverage) - 1e-9).ceil();
    (raw.max(1.0)) as usize
}

/// Finite-sample-adjusted `(1 - miscoverage)` quantile of the scores.
pub fn conformal_quantile(
    scores: &ScoreList,
    miscoverage: f64,
) -> Result<Threshold, ConformalError> {
    if !(miscoverage > 0.0 && miscoverage < 1.0) {
        return Err(ConformalError::InvalidMiscoverage(miscoverage));
    }
    let k = adjusted_rank(scores.len(), miscoverage);
    Ok(if k > scores.len() {
        Threshold::all_inclusive()
    } else {
        Threshold::at(scores.sorted[k - 1])
    })
}

pub fn lac_score(probs: &[f64], label: usize) -> f64 {
    1.0 - probs[label]
}

/// Class indices by descending probability, ascending index on ties.
pub fn descending_order(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// Sum of the probabilities ranked at or above `label` in [`descending_order`].
pub fn aps_score(probs: &[f64], label: usize) -> f64 {
    let mut total = 0.0;
    for c in descending_order(probs) {
        total += probs[c];
        if c == label {
            break;
        }
    }
    total
}

/// `{y : 1 - p[y] <= threshold}`, falling back to the argmax when empty.
/// Returned indices are ascending.
pub fn lac_set(probs: &[f64], threshold: Threshold) -> Vec<usize> {
    let set: Vec<usize> = (0..probs.len())
        .filter(|&y| threshold.admits(lac_score(probs, y)))
        .collect();
    if set.is_empty() {
        vec![argmax(probs)]
    } else {
        set
    }
}

/// Non-randomized APS set: every class whose cumulative descending mass is
/// within the threshold, floored at the top-1 class. Returned indices are
/// ascending.
pub fn aps_set(probs: &[f64], threshold: Threshold) -> Vec<usize> {
    let order = descending_order(probs);
    let mut set = Vec::with_capacity(probs.len());
    let mut total = 0.0;
    for &c in &order {
        total += probs[c];
        if !threshold.admits(total.min(1.0)) {
            break;
        }
        set.push(c);
    }
    if set.is_empty() {
        set.push(order[0]);
    }
    set.sort_unstable();
    set
}

/// Test-time nonconformity `1 - max p`.
pub fn test_score(probs: &[f64]) -> f64 {
    1.0 - probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Which set constructor a caller wants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetRule {
    #[default]
    Lac,
    Aps,
}

impl SetRule {
    pub fn build(self, probs: &[f64], threshold: Threshold) -> Vec<usize> {
        match self {
            SetRule::Lac => lac_set(probs, threshold),
            SetRule::Aps => aps_set(probs, threshold),
        }
    }
}
