//! The `cap` command line: synthetic data generation, baseline and policy
//! evaluation, policy training and report tables.
//!
//! One `--seed` drives every stage. Each stage draws from its own named
//! stream (generation, split, policy, decisions), so changing one stage
//! never shifts the randomness seen by another.

pub mod output;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use cap_core::conformal::{
    aps_calibration_scores, aps_set, calibration_scores, conformal_quantile, lac_set,
};
use cap_core::dataset::{
    generate_synthetic, load_records, split, RecordFormat, SplitDataset, SyntheticSpec,
};
use cap_core::metrics::{
    full_report, CalibrationCredit, EvalOutcome, MetricsReport, ReportOptions,
};
use cap_core::policy::{Decision, DecisionMode, PolicyConfig, ThresholdSource, DEFAULT_SHARPNESS};
use cap_core::rng::{self, streams};
use cap_core::trainer::{
    train, write_trace_csv, Baseline, CostWeights, EpisodeEnv, PolicyDocument, StateKind,
    TrainConfig,
};
use cap_core::SetRule;

#[derive(Debug, Parser)]
#[command(
    name = "cap",
    version,
    about = "Conformal abstention policies: generate, evaluate, train, report"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic JSONL dataset.
    Gen(GenArgs),
    /// Evaluate LAC, APS or CAP on the test side of a split and write a report.
    Eval(EvalArgs),
    /// Train the threshold policy and write the policy and its trace.
    Train(TrainArgs),
    /// Merge report JSON files into one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.0)]
    pub label_noise: f64,
    #[arg(long, default_value_t = SyntheticSpec::DEFAULT_SIGNAL)]
    pub signal: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Lac,
    Aps,
    Cap,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Lac => "lac",
            Method::Aps => "aps",
            Method::Cap => "cap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    Lac,
    Aps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CutoffArg {
    Abstain,
    Predict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CreditArg {
    Fractional,
    Membership,
}

/// Options shared by `eval` and `train`: the data, its split and the
/// decision rule.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub cal_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sigmoid sharpness of the regime probabilities.
    #[arg(long, default_value_t = DEFAULT_SHARPNESS)]
    pub c: f64,
    #[arg(long, value_enum, default_value_t = RuleArg::Lac)]
    pub set_rule: RuleArg,
    /// Cutoff used to build sets in the set regime.
    #[arg(long, value_enum, default_value_t = CutoffArg::Abstain)]
    pub set_threshold: CutoffArg,
}

impl DataArgs {
    fn policy_config(&self) -> Result<PolicyConfig> {
        let config = PolicyConfig {
            c: self.c,
            set_rule: match self.set_rule {
                RuleArg::Lac => SetRule::Lac,
                RuleArg::Aps => SetRule::Aps,
            },
            set_threshold_source: match self.set_threshold {
                CutoffArg::Abstain => ThresholdSource::Abstain,
                CutoffArg::Predict => ThresholdSource::Predict,
            },
        };
        config.validate().map_err(anyhow::Error::msg)?;
        Ok(config)
    }

    fn load_split(&self) -> Result<SplitDataset> {
        ensure!(
            self.cal_fraction > 0.0 && self.cal_fraction < 1.0,
            "--cal-fraction must lie in (0, 1), got {}",
            self.cal_fraction
        );
        let records = load_records(&self.data, RecordFormat::Jsonl)
            .with_context(|| format!("cannot load {}", self.data.display()))?;
        Ok(split(
            &records,
            self.cal_fraction,
            rng::derive_seed(self.seed, streams::SPLIT),
        )?)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub method: Method,
    /// Miscoverage level; for CAP this sets the prediction cutoff.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// CAP abstention level.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Trained CAP policy; its greedy levels replace --alpha and --beta.
    #[arg(long, conflicts_with = "beta")]
    pub policy: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Deterministic)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = ReportOptions::DEFAULT_BINS)]
    pub n_bins: usize,
    #[arg(long, value_enum, default_value_t = CreditArg::Fractional)]
    pub ece_credit: CreditArg,
    /// Dataset name recorded in the report; defaults to the data file stem.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    None,
    MovingAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StateArg {
    Constant,
    CalibrationSummary,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 500)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Set-size weight.
    #[arg(long, default_value_t = 0.05)]
    pub lambda1: f64,
    /// Abstention penalty.
    #[arg(long, default_value_t = 0.1)]
    pub lambda2: f64,
    /// Answer-rate bonus.
    #[arg(long, default_value_t = 0.1)]
    pub lambda3: f64,
    /// Regime-diversity bonus.
    #[arg(long, default_value_t = 0.05)]
    pub lambda4: f64,
    #[arg(long, value_enum, default_value_t = BaselineArg::None)]
    pub baseline: BaselineArg,
    /// Moving-average window, in samples.
    #[arg(long, default_value_t = 10)]
    pub window: usize,
    /// Actions sampled per episode; their gradients are averaged.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Decision mode inside training episodes.
    #[arg(long, value_enum, default_value_t = ModeArg::Stochastic)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = StateArg::Constant)]
    pub state: StateArg,
    #[arg(long)]
    pub out_policy: PathBuf,
    #[arg(long)]
    pub out_trace: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
    Md,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files written by `eval`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Md)]
    pub format: FormatArg,
    /// Output file; the table goes to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn decision_mode(mode: ModeArg) -> DecisionMode {
    match mode {
        ModeArg::Deterministic => DecisionMode::Deterministic,
        ModeArg::Stochastic => DecisionMode::Stochastic,
    }
}

fn check_level(name: &str, value: f64) -> Result<()> {
    ensure!(
        value > 0.0 && value < 1.0,
        "{name} must lie in (0, 1), got {value}"
    );
    Ok(())
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(&args, stdout),
        Command::Eval(args) => cmd_eval(&args, stdout),
        Command::Train(args) => cmd_train(&args, stdout),
        Command::Report(args) => cmd_report(&args, stdout),
    }
}

pub fn cmd_gen(args: &GenArgs, stdout: &mut dyn Write) -> Result<()> {
    let spec = SyntheticSpec {
        n: args.n,
        num_classes: args.classes,
        temperature: args.temperature,
        label_noise: args.label_noise,
        signal: args.signal,
        seed: rng::derive_seed(args.seed, streams::GENERATION),
    };
    let records = generate_synthetic(&spec)?;
    output::write_atomic(&args.out, records.to_jsonl_string().as_bytes())?;
    writeln!(stdout, "{}", records.len())?;
    Ok(())
}

fn lac_outcomes(data: &SplitDataset, alpha: f64) -> Result<Vec<EvalOutcome>> {
    let q = conformal_quantile(&calibration_scores(&data.calibration)?, alpha)?;
    Ok(data
        .test
        .iter()
        .map(|r| EvalOutcome {
            decision: Decision::Set(lac_set(r.probs(), q)),
            label: r.label(),
            confidence: r.max_prob(),
        })
        .collect())
}

fn aps_outcomes(data: &SplitDataset, alpha: f64) -> Result<Vec<EvalOutcome>> {
    let q = conformal_quantile(&aps_calibration_scores(&data.calibration)?, alpha)?;
    Ok(data
        .test
        .iter()
        .map(|r| EvalOutcome {
            decision: Decision::Set(aps_set(r.probs(), q)),
            label: r.label(),
            confidence: r.max_prob(),
        })
        .collect())
}

fn dataset_name(explicit: Option<&str>, path: &Path) -> String {
    explicit.map(str::to_owned).unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    })
}

pub fn cmd_eval(args: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    check_level("--alpha", args.alpha)?;
    ensure!(args.n_bins >= 1, "--n-bins must be at least 1");
    if args.method != Method::Cap && (args.beta.is_some() || args.policy.is_some()) {
        bail!("--beta and --policy apply only to --method cap");
    }
    let config = args.data.policy_config()?;
    let data = args.data.load_split()?;

    let outcomes = match args.method {
        Method::Lac => lac_outcomes(&data, args.alpha)?,
        Method::Aps => aps_outcomes(&data, args.alpha)?,
        Method::Cap => {
            let (alpha, beta) = match (&args.policy, args.beta) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("cannot read {}", path.display()))?;
                    PolicyDocument::from_json(&text)?.greedy_actions()?
                }
                (None, Some(beta)) => (args.alpha, beta),
                (None, None) => bail!("--method cap needs --beta or --policy"),
            };
            check_level("beta", beta)?;
            let env = EpisodeEnv::new(&data)?;
            let thresholds = env.thresholds(alpha, beta)?;
            let mut decisions = rng::stream(args.data.seed, streams::DECISIONS, 0);
            env.decide(
                &thresholds,
                &config,
                decision_mode(args.mode),
                &mut decisions,
            )
        }
    };

    let options = ReportOptions {
        n_bins: args.n_bins,
        ece_credit: match args.ece_credit {
            CreditArg::Fractional => CalibrationCredit::Fractional,
            CreditArg::Membership => CalibrationCredit::Membership,
        },
        ..ReportOptions::new(
            args.method.name(),
            dataset_name(args.dataset.as_deref(), &args.data.data),
        )
    };
    let report = full_report(&outcomes, &options)?;
    output::write_atomic(&args.out, output::to_json(&report)?.as_bytes())?;
    writeln!(
        stdout,
        "{} n={} coverage={:.4} accuracy={:.4} avg_set_size={:.4} abstention={:.4}",
        report.method,
        report.n,
        report.coverage,
        report.accuracy,
        report.avg_set_size,
        report.abstention_rate
    )?;
    Ok(())
}

/// Everything that determines a training run, hashed into the policy file.
#[derive(Serialize)]
struct RunFingerprint<'a> {
    data_sha256: String,
    cal_fraction: f64,
    policy: &'a PolicyConfig,
    weights: &'a CostWeights,
    train: &'a TrainConfig,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn cmd_train(args: &TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let policy = args.data.policy_config()?;
    let weights = CostWeights::new(args.lambda1, args.lambda2, args.lambda3, args.lambda4);
    let config = TrainConfig {
        episodes: args.episodes,
        learning_rate: args.lr,
        seed: args.data.seed,
        baseline: match args.baseline {
            BaselineArg::None => Baseline::None,
            BaselineArg::MovingAverage => Baseline::MovingAverage {
                window: args.window,
            },
        },
        mode: decision_mode(args.mode),
        batch_size: args.batch,
        state: match args.state {
            StateArg::Constant => StateKind::Constant,
            StateArg::CalibrationSummary => StateKind::CalibrationSummary,
        },
        ..TrainConfig::default()
    };
    config.validate()?;
    let data = args.data.load_split()?;
    let outcome = train(&data, &policy, &weights, &config)?;

    let raw = std::fs::read(&args.data.data)?;
    let fingerprint = RunFingerprint {
        data_sha256: sha256_hex(&raw),
        cal_fraction: args.data.cal_fraction,
        policy: &policy,
        weights: &weights,
        train: &config,
    };
    let hash = sha256_hex(serde_json::to_string(&fingerprint)?.as_bytes());
    let doc = PolicyDocument::new(&outcome.params, &outcome.state, config.boxes, hash);

    let mut trace = Vec::new();
    write_trace_csv(&outcome.trace, &mut trace)?;
    output::write_atomic(&args.out_policy, output::to_json(&doc)?.as_bytes())?;
    output::write_atomic(&args.out_trace, &trace)?;

    let env = EpisodeEnv::new(&data)?;
    let greedy = env.evaluate(
        outcome.greedy_alpha,
        outcome.greedy_beta,
        &policy,
        &weights,
        DecisionMode::Deterministic,
        &mut rng::stream(args.data.seed, streams::DECISIONS, u64::MAX),
    )?;
    writeln!(
        stdout,
        "alpha={:.6} beta={:.6} cost={:.6}",
        outcome.greedy_alpha, outcome.greedy_beta, greedy.cost
    )?;
    Ok(())
}

pub fn read_reports(paths: &[PathBuf]) -> Result<Vec<MetricsReport>> {
    let mut reports: Vec<MetricsReport> = Vec::with_capacity(paths.len());
    for path in paths {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let report: MetricsReport = serde_json::from_str(&text)
            .with_context(|| format!("{} is not a metrics report", path.display()))?;
        if reports
            .iter()
            .any(|r| r.method == report.method && r.dataset == report.dataset)
        {
            bail!(
                "duplicate row for method {:?} on dataset {:?}",
                report.method,
                report.dataset
            );
        }
        reports.push(report);
    }
    Ok(reports)
}

pub fn cmd_report(args: &ReportArgs, stdout: &mut dyn Write) -> Result<()> {
    let reports = read_reports(&args.inputs)?;
    let table = match args.format {
        FormatArg::Json => output::to_json(&reports)?,
        FormatArg::Csv => output::to_csv(&reports)?,
        FormatArg::Md => output::to_markdown(&reports),
    };
    match &args.out {
        Some(path) => output::write_atomic(path, table.as_bytes())?,
        None => stdout.write_all(table.as_bytes())?,
    }
    Ok(())
}
