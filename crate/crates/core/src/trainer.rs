//! REINFORCE over the miscoverage pair `(alpha, beta)`.
//!
//! Every episode is a single bandit pull: sample `(alpha, beta)` from a
//! diagonal Gaussian policy, conformalize on the calibration split, decide
//! every test sample, score the outcome with the multi-objective cost and
//! step the policy along `(R - b) * grad log pi`.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{calibration_scores, test_score, ConformalError, ScoreList};
use crate::dataset::{RecordSet, SplitDataset};
use crate::metrics::{self, EvalOutcome};
use crate::policy::{
    choose_regime, compute_thresholds, realize, DecisionMode, PolicyConfig, ThresholdPair,
};
use crate::rng::{self, streams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error("state has {got} features but the policy map expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite policy gradient at episode {episode}: {detail}")]
    NonFiniteGradient { episode: usize, detail: String },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("trace i/o: {0}")]
    Csv(#[from] csv::Error),
    #[error("policy i/o: {0}")]
    Json(#[from] serde_json::Error),
}

/// Closed interval used to clamp sampled actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        (self.lo..=self.hi).contains(&x)
    }

    fn validate(&self, name: &str) -> Result<(), TrainError> {
        if self.lo > 0.0 && self.hi < 1.0 && self.lo < self.hi {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!(
                "{name} box [{}, {}] must be a nondegenerate interval inside (0, 1)",
                self.lo, self.hi
            )))
        }
    }
}

/// Clamping boxes for the sampled actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBoxes {
    pub alpha: Interval,
    pub beta: Interval,
}

impl Default for ActionBoxes {
    fn default() -> Self {
        Self {
            alpha: Interval::new(0.01, 0.40),
            beta: Interval::new(0.005, 0.40),
        }
    }
}

impl ActionBoxes {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.alpha.validate("alpha")?;
        self.beta.validate("beta")?;
        if self.alpha.lo < self.beta.lo {
            return Err(TrainError::InvalidConfig(
                "alpha box must not start below the beta box (beta is clamped to at most alpha)"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Clamp into the boxes, then enforce `beta <= alpha`.
    pub fn apply(&self, alpha: f64, beta: f64) -> (f64, f64) {
        let alpha = self.alpha.clamp(alpha);
        (alpha, self.beta.clamp(beta).min(alpha))
    }
}

/// Affine state map added on top of the base parameters:
/// `[mu_a, mu_b, log_sigma_a, log_sigma_b] = base + weights * features`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    /// Four rows, one per output, each of feature length.
    pub weights: Vec<Vec<f64>>,
}

impl AffineMap {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![vec![0.0; dim]; 4],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }
}

/// Gaussian policy parameters. Without a state map, the base parameters are
/// the means and log-scales directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub mu_alpha: f64,
    pub mu_beta: f64,
    pub log_sigma_alpha: f64,
    pub log_sigma_beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_map: Option<AffineMap>,
}

impl PolicyParams {
    pub fn new(mu_alpha: f64, mu_beta: f64, sigma_alpha: f64, sigma_beta: f64) -> Self {
        Self {
            mu_alpha,
            mu_beta,
            log_sigma_alpha: sigma_alpha.ln(),
            log_sigma_beta: sigma_beta.ln(),
            state_map: None,
        }
    }

    pub fn with_state_map(mut self, map: AffineMap) -> Self {
        self.state_map = Some(map);
        self
    }

    fn base(&self) -> [f64; 4] {
        [
            self.mu_alpha,
            self.mu_beta,
            self.log_sigma_alpha,
            self.log_sigma_beta,
        ]
    }

    /// Flat view: base parameters, then map weights row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.base().to_vec();
        if let Some(map) = &self.state_map {
            v.extend(map.weights.iter().flatten());
        }
        v
    }

    /// Inverse of [`to_flat`](Self::to_flat) for the same shape.
    pub fn from_flat_like(&self, flat: &[f64]) -> Self {
        let mut out = Self {
            mu_alpha: flat[0],
            mu_beta: flat[1],
            log_sigma_alpha: flat[2],
            log_sigma_beta: flat[3],
            state_map: self.state_map.clone(),
        };
        if let Some(map) = &mut out.state_map {
            let dim = map.input_dim();
            for (r, row) in map.weights.iter_mut().enumerate() {
                row.copy_from_slice(&flat[4 + r * dim..4 + (r + 1) * dim]);
            }
        }
        out
    }
}

/// Policy input features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub features: Vec<f64>,
}

impl PolicyState {
    pub fn constant() -> Self {
        Self {
            features: vec![1.0],
        }
    }

    /// Bias plus mean, std, min, quartiles and max of the calibration scores.
    pub fn calibration_summary(scores: &ScoreList) -> Self {
        let s = scores.sorted();
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let q = |p: f64| {
            let pos = p * (s.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
        };
        Self {
            features: vec![
                1.0,
                mean,
                var.sqrt(),
                s[0],
                q(0.25),
                q(0.5),
                q(0.75),
                s[s.len() - 1],
            ],
        }
    }
}

/// Means and standard deviations of the two action Gaussians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianHeads {
    pub mu_alpha: f64,
    pub sigma_alpha: f64,
    pub mu_beta: f64,
    pub sigma_beta: f64,
}

fn outputs(params: &PolicyParams, state: &PolicyState) -> Result<[f64; 4], TrainError> {
    let mut out = params.base();
    if let Some(map) = &params.state_map {
        if map.input_dim() != state.features.len() {
            return Err(TrainError::DimensionMismatch {
                expected: map.input_dim(),
                got: state.features.len(),
            });
        }
        for (o, row) in out.iter_mut().zip(&map.weights) {
            *o += row
                .iter()
                .zip(&state.features)
                .map(|(w, f)| w * f)
                .sum::<f64>();
        }
    }
    Ok(out)
}

pub fn policy_forward(
    params: &PolicyParams,
    state: &PolicyState,
) -> Result<GaussianHeads, TrainError> {
    let [mu_alpha, mu_beta, ls_alpha, ls_beta] = outputs(params, state)?;
    Ok(GaussianHeads {
        mu_alpha,
        sigma_alpha: ls_alpha.exp(),
        mu_beta,
        sigma_beta: ls_beta.exp(),
    })
}

pub fn gaussian_log_density(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// One draw from the policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSample {
    /// Pre-clamp draws; the log-probability is evaluated here.
    pub raw_alpha: f64,
    pub raw_beta: f64,
    /// Clamped into the boxes with `beta <= alpha`.
    pub alpha: f64,
    pub beta: f64,
    pub log_prob: f64,
}

/// Draws alpha first, then beta, from `rng`.
pub fn sample_actions<R: Rng + ?Sized>(
    heads: &GaussianHeads,
    boxes: &ActionBoxes,
    rng: &mut R,
) -> ActionSample {
    let za: f64 = rng.sample(StandardNormal);
    let zb: f64 = rng.sample(StandardNormal);
    let raw_alpha = heads.mu_alpha + heads.sigma_alpha * za;
    let raw_beta = heads.mu_beta + heads.sigma_beta * zb;
    let log_prob = gaussian_log_density(raw_alpha, heads.mu_alpha, heads.sigma_alpha)
        + gaussian_log_density(raw_beta, heads.mu_beta, heads.sigma_beta);
    let (alpha, beta) = boxes.apply(raw_alpha, raw_beta);
    ActionSample {
        raw_alpha,
        raw_beta,
        alpha,
        beta,
        log_prob,
    }
}

/// Analytic `grad log pi(raw_alpha, raw_beta)` in the flat layout of
/// [`PolicyParams::to_flat`].
pub fn log_prob_gradient(
    params: &PolicyParams,
    state: &PolicyState,
    raw_alpha: f64,
    raw_beta: f64,
) -> Result<Vec<f64>, TrainError> {
    let h = policy_forward(params, state)?;
    let za = (raw_alpha - h.mu_alpha) / h.sigma_alpha;
    let zb = (raw_beta - h.mu_beta) / h.sigma_beta;
    let out_grad = [
        za / h.sigma_alpha,
        zb / h.sigma_beta,
        za * za - 1.0,
        zb * zb - 1.0,
    ];
    let mut grad = out_grad.to_vec();
    if params.state_map.is_some() {
        for g in out_grad {
            grad.extend(state.features.iter().map(|f| g * f));
        }
    }
    Ok(grad)
}

/// Log-density of `(raw_alpha, raw_beta)` under the current policy.
pub fn log_prob(
    params: &PolicyParams,
    state: &PolicyState,
    raw_alpha: f64,
    raw_beta: f64,
) -> Result<f64, TrainError> {
    let h = policy_forward(params, state)?;
    Ok(gaussian_log_density(raw_alpha, h.mu_alpha, h.sigma_alpha)
        + gaussian_log_density(raw_beta, h.mu_beta, h.sigma_beta))
}

/// `params + lr * (reward - baseline) * grad`.
pub fn reinforce_update(
    params: &PolicyParams,
    grad: &[f64],
    reward: f64,
    baseline: f64,
    lr: f64,
) -> Result<PolicyParams, TrainError> {
    let advantage = reward - baseline;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            episode: 0,
            detail: format!("component {i} is {}", grad[i]),
        });
    }
    let flat: Vec<f64> = params
        .to_flat()
        .iter()
        .zip(grad)
        .map(|(p, g)| p + lr * advantage * g)
        .collect();
    if let Some(i) = flat.iter().position(|p| !p.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            episode: 0,
            detail: format!("parameter {i} became {}", flat[i]),
        });
    }
    Ok(params.from_flat_like(&flat))
}

/// Cost trade-off weights: set size, abstention, coverage, diversity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.05,
            lambda2: 0.1,
            lambda3: 0.1,
            lambda4: 0.05,
        }
    }
}

impl CostWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, lambda4: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            lambda3,
            lambda4,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().all(|l| *l >= 0.0 && l.is_finite()) {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!(
                "cost weights must be nonnegative, got {all:?}"
            )))
        }
    }
}

/// Normalized Shannon entropy (base 3) of the single/set/abstain counts.
pub fn diversity(regime_counts: [usize; 3]) -> f64 {
    let n: usize = regime_counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let h: f64 = regime_counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum();
    h / 3f64.ln()
}

/// Episode statistics that feed the cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostInputs {
    pub accuracy: f64,
    pub avg_set_size: f64,
    pub abstention_rate: f64,
    pub diversity: f64,
}

/// `(1 - acc) + l1 avgSet + l2 abstention - l3 (1 - abstention) - l4 div`.
pub fn cost(stats: &CostInputs, w: &CostWeights) -> f64 {
    (1.0 - stats.accuracy) + w.lambda1 * stats.avg_set_size + w.lambda2 * stats.abstention_rate
        - w.lambda3 * (1.0 - stats.abstention_rate)
        - w.lambda4 * stats.diversity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub alpha: f64,
    pub beta: f64,
    /// Fractional accuracy over answered samples.
    pub accuracy: f64,
    pub abstention_rate: f64,
    pub avg_set_size: f64,
    pub cost_coverage: f64,
    pub diversity: f64,
    pub cost: f64,
    pub reward: f64,
    /// Single, set, abstain.
    pub regime_counts: [usize; 3],
}

/// Calibration scores and test records prepared once for many episodes.
#[derive(Debug, Clone)]
pub struct EpisodeEnv {
    calibration: ScoreList,
    test: RecordSet,
    test_scores: Vec<f64>,
}

impl EpisodeEnv {
    pub fn new(data: &SplitDataset) -> Result<Self, TrainError> {
        Ok(Self {
            calibration: calibration_scores(&data.calibration)?,
            test_scores: data.test.iter().map(|r| test_score(r.probs())).collect(),
            test: data.test.clone(),
        })
    }

    pub fn calibration(&self) -> &ScoreList {
        &self.calibration
    }

    pub fn test(&self) -> &RecordSet {
        &self.test
    }

    pub fn thresholds(&self, alpha: f64, beta: f64) -> Result<ThresholdPair, TrainError> {
        Ok(compute_thresholds(&self.calibration, alpha, beta)?)
    }

    /// Decide every test sample in order. Stochastic mode draws one uniform
    /// per sample from `rng`.
    pub fn decide<R: Rng + ?Sized>(
        &self,
        thresholds: &ThresholdPair,
        config: &PolicyConfig,
        mode: DecisionMode,
        rng: &mut R,
    ) -> Vec<EvalOutcome> {
        self.test
            .iter()
            .zip(&self.test_scores)
            .map(|(record, &score)| {
                let regime = choose_regime(score, thresholds, config, mode, rng);
                EvalOutcome {
                    decision: realize(record.probs(), regime, thresholds, config),
                    label: record.label(),
                    confidence: 1.0 - score,
                }
            })
            .collect()
    }

    pub fn evaluate<R: Rng + ?Sized>(
        &self,
        alpha: f64,
        beta: f64,
        config: &PolicyConfig,
        weights: &CostWeights,
        mode: DecisionMode,
        rng: &mut R,
    ) -> Result<EpisodeResult, TrainError> {
        let thresholds = self.thresholds(alpha, beta)?;
        let outcomes = self.decide(&thresholds, config, mode, rng);
        let mut regime_counts = [0usize; 3];
        for o in &outcomes {
            regime_counts[o.decision.regime().index()] += 1;
        }
        let inputs = CostInputs {
            accuracy: metrics::fractional_accuracy(&outcomes),
            avg_set_size: metrics::avg_set_size(&outcomes),
            abstention_rate: metrics::abstention_rate(&outcomes),
            diversity: diversity(regime_counts),
        };
        let c = cost(&inputs, weights);
        Ok(EpisodeResult {
            alpha: thresholds.alpha,
            beta: thresholds.beta,
            accuracy: inputs.accuracy,
            abstention_rate: inputs.abstention_rate,
            avg_set_size: inputs.avg_set_size,
            cost_coverage: 1.0 - inputs.abstention_rate,
            diversity: inputs.diversity,
            cost: c,
            reward: -c,
            regime_counts,
        })
    }
}

pub fn evaluate_episode<R: Rng + ?Sized>(
    data: &SplitDataset,
    alpha: f64,
    beta: f64,
    config: &PolicyConfig,
    weights: &CostWeights,
    mode: DecisionMode,
    rng: &mut R,
) -> Result<EpisodeResult, TrainError> {
    EpisodeEnv::new(data)?.evaluate(alpha, beta, config, weights, mode, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Baseline {
    #[default]
    None,
    /// Mean reward of the last `window` samples; before any history, the
    /// mean reward of the current batch.
    MovingAverage { window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    #[default]
    Constant,
    CalibrationSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyInit {
    pub mu_alpha: f64,
    pub mu_beta: f64,
    pub sigma: f64,
}

impl Default for PolicyInit {
    fn default() -> Self {
        Self {
            mu_alpha: 0.10,
            mu_beta: 0.05,
            sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub learning_rate: f64,
    pub boxes: ActionBoxes,
    pub seed: u64,
    pub baseline: Baseline,
    pub mode: DecisionMode,
    /// Policy samples averaged into one update.
    pub batch_size: usize,
    pub state: StateKind,
    pub init: PolicyInit,
    /// Log-scales are clipped into `[ln lo, ln hi]` after each update.
    pub sigma_bounds: Interval,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            learning_rate: 0.01,
            boxes: ActionBoxes::default(),
            seed: 0,
            baseline: Baseline::None,
            mode: DecisionMode::Stochastic,
            batch_size: 1,
            state: StateKind::Constant,
            init: PolicyInit::default(),
            sigma_bounds: Interval::new(1e-3, 0.25),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.boxes.validate()?;
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be nonnegative, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if let Baseline::MovingAverage { window: 0 } = self.baseline {
            return bad("moving-average window must be at least 1".into());
        }
        if !(self.init.sigma > 0.0 && self.init.sigma.is_finite()) {
            return bad(format!(
                "initial sigma must be positive, got {}",
                self.init.sigma
            ));
        }
        if !(self.sigma_bounds.lo > 0.0 && self.sigma_bounds.lo <= self.sigma_bounds.hi) {
            return bad("sigma bounds must satisfy 0 < lo <= hi".into());
        }
        Ok(())
    }

    pub fn initial_params(&self, state: &PolicyState) -> PolicyParams {
        let p = PolicyParams::new(
            self.init.mu_alpha,
            self.init.mu_beta,
            self.init.sigma,
            self.init.sigma,
        );
        match self.state {
            StateKind::Constant => p,
            StateKind::CalibrationSummary => {
                p.with_state_map(AffineMap::zeros(state.features.len()))
            }
        }
    }
}

/// One row of the training trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub episode: usize,
    pub alpha: f64,
    pub beta: f64,
    pub cost: f64,
    pub reward: f64,
    pub n_single: usize,
    pub n_set: usize,
    pub n_abstain: usize,
}

impl TraceRow {
    fn from_result(episode: usize, r: &EpisodeResult) -> Self {
        Self {
            episode,
            alpha: r.alpha,
            beta: r.beta,
            cost: r.cost,
            reward: r.reward,
            n_single: r.regime_counts[0],
            n_set: r.regime_counts[1],
            n_abstain: r.regime_counts[2],
        }
    }
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<(), TrainError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record([
        "episode",
        "alpha",
        "beta",
        "cost",
        "reward",
        "n_single",
        "n_set",
        "n_abstain",
    ])?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRow>, TrainError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let expected = [
        "episode",
        "alpha",
        "beta",
        "cost",
        "reward",
        "n_single",
        "n_set",
        "n_abstain",
    ];
    if header.iter().ne(expected) {
        return Err(TrainError::InvalidConfig(format!(
            "unexpected trace header {:?}",
            header
        )));
    }
    Ok(r.deserialize().collect::<Result<Vec<TraceRow>, _>>()?)
}

/// Result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub state: PolicyState,
    pub trace: Vec<TraceRow>,
    /// Clamped policy means.
    pub greedy_alpha: f64,
    pub greedy_beta: f64,
}

pub fn greedy_actions(
    params: &PolicyParams,
    state: &PolicyState,
    boxes: &ActionBoxes,
) -> Result<(f64, f64), TrainError> {
    let h = policy_forward(params, state)?;
    if !(h.mu_alpha.is_finite() && h.mu_beta.is_finite()) {
        return Err(TrainError::InvalidConfig(format!(
            "policy means ({}, {}) are not finite",
            h.mu_alpha, h.mu_beta
        )));
    }
    Ok(boxes.apply(h.mu_alpha, h.mu_beta))
}

fn clip_log_sigmas(params: &mut PolicyParams, bounds: &Interval) {
    let (lo, hi) = (bounds.lo.ln(), bounds.hi.ln());
    params.log_sigma_alpha = params.log_sigma_alpha.clamp(lo, hi);
    params.log_sigma_beta = params.log_sigma_beta.clamp(lo, hi);
}

pub fn train(
    data: &SplitDataset,
    policy_config: &PolicyConfig,
    weights: &CostWeights,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    policy_config
        .validate()
        .map_err(TrainError::InvalidConfig)?;
    weights.validate()?;
    config.validate()?;

    let env = EpisodeEnv::new(data)?;
    let state = match config.state {
        StateKind::Constant => PolicyState::constant(),
        StateKind::CalibrationSummary => PolicyState::calibration_summary(env.calibration()),
    };
    let mut params = config.initial_params(&state);
    let mut trace = Vec::with_capacity(config.episodes * config.batch_size);
    let mut history: Vec<f64> = Vec::new();

    for episode in 0..config.episodes {
        let mut policy_rng = rng::stream(config.seed, streams::POLICY, episode as u64);
        let mut decision_rng = rng::stream(config.seed, streams::DECISIONS, episode as u64);
        // `None` defers to the mean reward of this episode's own batch.
        let baseline = match config.baseline {
            Baseline::None => Some(0.0),
            Baseline::MovingAverage { window } => {
                let recent = &history[history.len().saturating_sub(window)..];
                (!recent.is_empty()).then(|| recent.iter().sum::<f64>() / recent.len() as f64)
            }
        };

        let heads = policy_forward(&params, &state)?;
        let mut samples = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let action = sample_actions(&heads, &config.boxes, &mut policy_rng);
            let result = env.evaluate(
                action.alpha,
                action.beta,
                policy_config,
                weights,
                config.mode,
                &mut decision_rng,
            )?;
            trace.push(TraceRow::from_result(episode, &result));
            samples.push((action, result.reward));
        }
        let rewards: Vec<f64> = samples.iter().map(|(_, r)| *r).collect();
        let baseline =
            baseline.unwrap_or_else(|| rewards.iter().sum::<f64>() / rewards.len() as f64);

        let mut step = vec![0.0; params.to_flat().len()];
        for (action, reward) in &samples {
            let grad = log_prob_gradient(&params, &state, action.raw_alpha, action.raw_beta)?;
            let scale = (reward - baseline) / config.batch_size as f64;
            for (s, g) in step.iter_mut().zip(&grad) {
                *s += scale * g;
            }
        }

        // The advantage is already folded into `step`.
        params =
            reinforce_update(&params, &step, 1.0, 0.0, config.learning_rate).map_err(
                |e| match e {
                    TrainError::NonFiniteGradient { detail, .. } => {
                        TrainError::NonFiniteGradient { episode, detail }
                    }
                    other => other,
                },
            )?;
        clip_log_sigmas(&mut params, &config.sigma_bounds);
        history.extend(rewards);
    }

    let (greedy_alpha, greedy_beta) = greedy_actions(&params, &state, &config.boxes)?;
    Ok(TrainOutcome {
        params,
        state,
        trace,
        greedy_alpha,
        greedy_beta,
    })
}

/// On-disk form of a trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDocument {
    pub mu_alpha: f64,
    pub mu_beta: f64,
    pub log_sigma_alpha: f64,
    pub log_sigma_beta: f64,
    pub boxes: ActionBoxes,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_map: Option<AffineMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<PolicyState>,
}

impl PolicyDocument {
    pub fn new(
        params: &PolicyParams,
        state: &PolicyState,
        boxes: ActionBoxes,
        config_hash: String,
    ) -> Self {
        Self {
            mu_alpha: params.mu_alpha,
            mu_beta: params.mu_beta,
            log_sigma_alpha: params.log_sigma_alpha,
            log_sigma_beta: params.log_sigma_beta,
            boxes,
            config_hash,
            state: params.state_map.as_ref().map(|_| state.clone()),
            state_map: params.state_map.clone(),
        }
    }

    pub fn params(&self) -> PolicyParams {
        PolicyParams {
            mu_alpha: self.mu_alpha,
            mu_beta: self.mu_beta,
            log_sigma_alpha: self.log_sigma_alpha,
            log_sigma_beta: self.log_sigma_beta,
            state_map: self.state_map.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let doc: Self = serde_json::from_str(text)?;
        doc.boxes.validate()?;
        let values = [
            doc.mu_alpha,
            doc.mu_beta,
            doc.log_sigma_alpha,
            doc.log_sigma_beta,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::InvalidConfig(
                "policy parameters must be finite".into(),
            ));
        }
        match (&doc.state_map, &doc.state) {
            (None, _) => {}
            (Some(map), Some(state)) => {
                if map
                    .weights
                    .iter()
                    .flatten()
                    .chain(&state.features)
                    .any(|v| !v.is_finite())
                {
                    return Err(TrainError::InvalidConfig(
                        "state map and features must be finite".into(),
                    ));
                }
                if map.weights.len() != 4
                    || map.weights.iter().any(|r| r.len() != state.features.len())
                {
                    return Err(TrainError::DimensionMismatch {
                        expected: state.features.len(),
                        got: map.input_dim(),
                    });
                }
            }
            (Some(_), None) => {
                return Err(TrainError::InvalidConfig(
                    "policy with a state map needs its state".into(),
                ));
            }
        }
        Ok(doc)
    }

    /// Greedy `(alpha, beta)` under the stored state (constant when absent).
    pub fn greedy_actions(&self) -> Result<(f64, f64), TrainError> {
        let state = self.state.clone().unwrap_or_else(PolicyState::constant);
        greedy_actions(&self.params(), &state, &self.boxes)
    }
}
