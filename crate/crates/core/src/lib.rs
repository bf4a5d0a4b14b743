//! Conformal abstention: split-conformal thresholds that choose between a
//! single answer, a prediction set and abstention, with the two miscoverage
//! levels tuned by a Gaussian REINFORCE policy.
//!
//! Module map:
//!
//! * [`dataset`]: probability records, JSONL I/O, splitting, synthetic data
//! * [`conformal`]: nonconformity scores, conformal quantile, LAC/APS sets
//! * [`policy`]: the three-regime decision rule
//! * [`trainer`]: cost, episodes and the policy-gradient loop
//! * [`metrics`]: accuracy, coverage, set size, AUROC, AUARC, ECE

pub mod conformal;
pub mod dataset;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use conformal::{ScoreList, SetRule, Threshold};
pub use dataset::{ProbRecord, RecordSet, SplitDataset, SyntheticSpec};
pub use metrics::{EvalOutcome, MetricsReport, ReportOptions};
pub use policy::{
    ActionDistribution, Decision, DecisionMode, PolicyConfig, Regime, ThresholdPair,
    ThresholdSource,
};
pub use trainer::{CostWeights, EpisodeResult, PolicyParams, PolicyState, TraceRow, TrainConfig};
