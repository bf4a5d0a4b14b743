//! Dual-threshold decision rule: single prediction below the predict cutoff,
//! a prediction set between the cutoffs, abstention at or above the abstain
//! cutoff. A sigmoid relaxation turns the same rule into a categorical
//! distribution over the three regimes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    conformal_quantile, test_score, ConformalError, ScoreList, SetRule, Threshold,
};
use crate::dataset::ProbRecord;

/// Default sigmoid sharpness. At 50 the single/abstain transitions are
/// roughly 0.1 wide in score units.
pub const DEFAULT_SHARPNESS: f64 = 50.0;

/// Predict and abstain cutoffs plus the miscoverage levels behind them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub q_predict: Threshold,
    pub q_abstain: Threshold,
    pub alpha: f64,
    /// Stored after clamping to `min(beta, alpha)`.
    pub beta: f64,
}

/// `q_predict` at level `alpha` and `q_abstain` at level `min(beta, alpha)`.
pub fn compute_thresholds(
    scores: &ScoreList,
    alpha: f64,
    beta: f64,
) -> Result<ThresholdPair, ConformalError> {
    let beta = beta.min(alpha);
    Ok(ThresholdPair {
        q_predict: conformal_quantile(scores, alpha)?,
        q_abstain: conformal_quantile(scores, beta)?,
        alpha,
        beta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Single,
    Set,
    Abstain,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Single, Regime::Set, Regime::Abstain];

    pub fn index(self) -> usize {
        match self {
            Regime::Single => 0,
            Regime::Set => 1,
            Regime::Abstain => 2,
        }
    }
}

/// Final per-sample outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "labels", rename_all = "lowercase")]
pub enum Decision {
    Single(usize),
    /// Nonempty, ascending class indices.
    Set(Vec<usize>),
    Abstain,
}

impl Decision {
    pub fn regime(&self) -> Regime {
        match self {
            Decision::Single(_) => Regime::Single,
            Decision::Set(_) => Regime::Set,
            Decision::Abstain => Regime::Abstain,
        }
    }

    /// Whether the decision names `label` (a single hit or set membership).
    pub fn contains(&self, label: usize) -> bool {
        match self {
            Decision::Single(y) => *y == label,
            Decision::Set(set) => set.contains(&label),
            Decision::Abstain => false,
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, Decision::Abstain)
    }
}

/// Which cutoff the set regime hands to the set constructor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSource {
    #[default]
    Abstain,
    Predict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionMode {
    #[default]
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Sigmoid sharpness `c > 0`.
    pub c: f64,
    pub set_rule: SetRule,
    pub set_threshold_source: ThresholdSource,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            c: DEFAULT_SHARPNESS,
            set_rule: SetRule::Lac,
            set_threshold_source: ThresholdSource::Abstain,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.c > 0.0 && self.c.is_finite() {
            Ok(())
        } else {
            Err(format!(
                "sigmoid scale c must be positive and finite, got {}",
                self.c
            ))
        }
    }
}

/// Categorical distribution over the three regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub p_single: f64,
    pub p_set: f64,
    pub p_abstain: f64,
}

impl ActionDistribution {
    pub fn point(regime: Regime) -> Self {
        let mut p = [0.0; 3];
        p[regime.index()] = 1.0;
        Self {
            p_single: p[0],
            p_set: p[1],
            p_abstain: p[2],
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_single, self.p_set, self.p_abstain]
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `p_single = sigmoid(-c (s - q_predict))`, `p_abstain = sigmoid(c (s - q_abstain))`,
/// `p_set` takes the remainder. A negative remainder is clamped to zero and
/// the other two are rescaled to sum to one.
pub fn action_probabilities(
    score: f64,
    thresholds: &ThresholdPair,
    config: &PolicyConfig,
) -> ActionDistribution {
    let p_single = sigmoid(-config.c * (score - thresholds.q_predict.value));
    let p_abstain = sigmoid(config.c * (score - thresholds.q_abstain.value));
    let p_set = 1.0 - p_single - p_abstain;
    if p_set >= 0.0 {
        ActionDistribution {
            p_single,
            p_set,
            p_abstain,
        }
    } else {
        let total = p_single + p_abstain;
        ActionDistribution {
            p_single: p_single / total,
            p_set: 0.0,
            p_abstain: p_abstain / total,
        }
    }
}

pub fn decide_deterministic(score: f64, thresholds: &ThresholdPair) -> Regime {
    if score < thresholds.q_predict.value {
        Regime::Single
    } else if score < thresholds.q_abstain.value {
        Regime::Set
    } else {
        Regime::Abstain
    }
}

/// One categorical draw; consumes exactly one uniform from `rng`.
pub fn decide_stochastic<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> Regime {
    let u: f64 = rng.random();
    if u < dist.p_single {
        Regime::Single
    } else if u < dist.p_single + dist.p_set {
        Regime::Set
    } else {
        Regime::Abstain
    }
}

/// Regime for one test score under the chosen mode.
pub fn choose_regime<R: Rng + ?Sized>(
    score: f64,
    thresholds: &ThresholdPair,
    config: &PolicyConfig,
    mode: DecisionMode,
    rng: &mut R,
) -> Regime {
    match mode {
        DecisionMode::Deterministic => decide_deterministic(score, thresholds),
        DecisionMode::Stochastic => {
            decide_stochastic(&action_probabilities(score, thresholds, config), rng)
        }
    }
}

/// Turn a regime into a concrete decision for `probs`.
pub fn realize(
    probs: &[f64],
    regime: Regime,
    thresholds: &ThresholdPair,
    config: &PolicyConfig,
) -> Decision {
    match regime {
        Regime::Single => Decision::Single(crate::dataset::argmax(probs)),
        Regime::Set => {
            let cutoff = match config.set_threshold_source {
                ThresholdSource::Abstain => thresholds.q_abstain,
                ThresholdSource::Predict => thresholds.q_predict,
            };
            Decision::Set(config.set_rule.build(probs, cutoff))
        }
        Regime::Abstain => Decision::Abstain,
    }
}

pub fn predict<R: Rng + ?Sized>(
    record: &ProbRecord,
    thresholds: &ThresholdPair,
    config: &PolicyConfig,
    mode: DecisionMode,
    rng: &mut R,
) -> Decision {
    let score = test_score(record.probs());
    let regime = choose_regime(score, thresholds, config, mode, rng);
    realize(record.probs(), regime, thresholds, config)
}
