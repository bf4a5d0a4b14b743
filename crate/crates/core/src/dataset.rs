//! Per-sample class-probability records: validation, JSONL I/O, seeded
//! splitting and a synthetic generator standing in for model softmax outputs.
//!
//! One record per line:
//!
//! ```text
//! {"id":"s000001","probs":[0.7,0.2,0.1],"label":0}
//! {"id":"s000002","logits":[2.0,0.5,-1.0],"label":2}
//! ```
//!
//! `logits` rows are converted with a max-shifted softmax. Rows whose
//! probabilities sum to within [`SIMPLEX_TOLERANCE`] of one are renormalized;
//! anything further off is rejected.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Maximum allowed deviation of a probability row's sum from one.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Rows closer to one than this are stored untouched, which keeps
/// write/read round trips bit-exact.
const RENORMALIZE_EPS: f64 = 1e-12;

/// Validation failure for a single record.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordError {
    #[error("probability vector is empty")]
    NoClasses,
    #[error("entry {index} is {value}, outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, more than {SIMPLEX_TOLERANCE} away from 1")]
    NotOnSimplex { sum: f64 },
    #[error("logit {index} is not finite")]
    NonFiniteLogit { index: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    InvalidRecord {
        line: usize,
        #[source]
        source: RecordError,
    },
    #[error("record {index}: {source}")]
    InvalidInput {
        index: usize,
        #[source]
        source: RecordError,
    },
    #[error("line {line}: expected {expected} classes, found {found}")]
    InconsistentClasses {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("record set is empty")]
    Empty,
    #[error("split with cal_fraction {cal_fraction} over {n} records leaves calibration={n_cal}, test={n_test}")]
    EmptySplit {
        cal_fraction: f64,
        n: usize,
        n_cal: usize,
        n_test: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// One sample: a class-probability vector and its ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbRecord {
    id: String,
    probs: Vec<f64>,
    label: usize,
}

impl ProbRecord {
    pub fn new(id: impl Into<String>, probs: Vec<f64>, label: usize) -> Result<Self, RecordError> {
        let probs = normalize_probs(probs)?;
        if label >= probs.len() {
            return Err(RecordError::LabelOutOfRange {
                label,
                num_classes: probs.len(),
            });
        }
        Ok(Self {
            id: id.into(),
            probs,
            label,
        })
    }

    /// Build a record from raw logits via a max-shifted softmax.
    pub fn from_logits(
        id: impl Into<String>,
        logits: &[f64],
        label: usize,
    ) -> Result<Self, RecordError> {
        if let Some(index) = logits.iter().position(|l| !l.is_finite()) {
            return Err(RecordError::NonFiniteLogit { index });
        }
        Self::new(id, softmax(logits), label)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (subtracts the max before exponentiating).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn normalize_probs(mut probs: Vec<f64>) -> Result<Vec<f64>, RecordError> {
    if probs.is_empty() {
        return Err(RecordError::NoClasses);
    }
    if let Some((index, &value)) = probs
        .iter()
        .enumerate()
        .find(|(_, p)| !(0.0..=1.0).contains(*p))
    {
        return Err(RecordError::OutOfRange { index, value });
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(RecordError::NotOnSimplex { sum });
    }
    if (sum - 1.0).abs() > RENORMALIZE_EPS {
        probs.iter_mut().for_each(|p| *p /= sum);
    }
    Ok(probs)
}

/// Ordered records sharing one class count, with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    records: Vec<ProbRecord>,
    num_classes: usize,
}

impl RecordSet {
    pub fn new(records: Vec<ProbRecord>) -> Result<Self, DatasetError> {
        let first = records.first().ok_or(DatasetError::Empty)?;
        let num_classes = first.num_classes();
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.num_classes() != num_classes {
                return Err(DatasetError::InconsistentClasses {
                    line: i + 1,
                    expected: num_classes,
                    found: r.num_classes(),
                });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId {
                    line: i + 1,
                    id: r.id.clone(),
                });
            }
        }
        Ok(Self {
            records,
            num_classes,
        })
    }

    pub fn records(&self) -> &[ProbRecord] {
        &self.records
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ProbRecord> {
        self.records.iter()
    }

    /// Parse JSON Lines from any buffered reader. Blank lines are skipped but
    /// still counted for line numbers.
    pub fn from_jsonl_reader<R: BufRead>(reader: R) -> Result<Self, DatasetError> {
        let mut records = Vec::new();
        let mut num_classes = None;
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record = parse_line(&line, line_no)?;
            let k = *num_classes.get_or_insert(record.num_classes());
            if record.num_classes() != k {
                return Err(DatasetError::InconsistentClasses {
                    line: line_no,
                    expected: k,
                    found: record.num_classes(),
                });
            }
            if !seen.insert(record.id.clone()) {
                return Err(DatasetError::DuplicateId {
                    line: line_no,
                    id: record.id,
                });
            }
            records.push(record);
        }
        let num_classes = num_classes.ok_or(DatasetError::Empty)?;
        Ok(Self {
            records,
            num_classes,
        })
    }

    pub fn from_jsonl_str(text: &str) -> Result<Self, DatasetError> {
        Self::from_jsonl_reader(text.as_bytes())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), DatasetError> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

impl<'a> IntoIterator for &'a RecordSet {
    type Item = &'a ProbRecord;
    type IntoIter = std::slice::Iter<'a, ProbRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    #[serde(default)]
    probs: Option<Vec<f64>>,
    #[serde(default)]
    logits: Option<Vec<f64>>,
    label: usize,
}

/// Parse and validate a single JSONL line.
pub fn parse_line(line: &str, line_no: usize) -> Result<ProbRecord, DatasetError> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let invalid = |source| DatasetError::InvalidRecord {
        line: line_no,
        source,
    };
    match (raw.probs, raw.logits) {
        (Some(probs), None) => ProbRecord::new(raw.id, probs, raw.label).map_err(invalid),
        (None, Some(logits)) => {
            ProbRecord::from_logits(raw.id, &logits, raw.label).map_err(invalid)
        }
        (Some(_), Some(_)) => Err(DatasetError::Parse {
            line: line_no,
            message: "record carries both `probs` and `logits`".into(),
        }),
        (None, None) => Err(DatasetError::Parse {
            line: line_no,
            message: "record needs `probs` or `logits`".into(),
        }),
    }
}

/// Supported on-disk record formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordFormat {
    #[default]
    Jsonl,
}

pub fn load_records(
    path: impl AsRef<Path>,
    format: RecordFormat,
) -> Result<RecordSet, DatasetError> {
    match format {
        RecordFormat::Jsonl => RecordSet::from_jsonl_reader(BufReader::new(File::open(path)?)),
    }
}

/// Calibration and test partitions of one record set.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub calibration: RecordSet,
    pub test: RecordSet,
    pub seed: u64,
}

/// Seeded uniform shuffle followed by a prefix (calibration) / suffix (test)
/// split. The calibration side gets `floor(n * cal_fraction)` records.
pub fn split(
    records: &RecordSet,
    cal_fraction: f64,
    seed: u64,
) -> Result<SplitDataset, DatasetError> {
    let n = records.len();
    let n_cal = if cal_fraction > 0.0 && cal_fraction < 1.0 {
        ((n as f64) * cal_fraction + 1e-9).floor() as usize
    } else {
        0
    };
    let n_cal = n_cal.min(n);
    if n_cal == 0 || n_cal == n {
        return Err(DatasetError::EmptySplit {
            cal_fraction,
            n,
            n_cal,
            n_test: n - n_cal,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let pick = |idx: &[usize]| RecordSet {
        records: idx.iter().map(|&i| records.records[i].clone()).collect(),
        num_classes: records.num_classes,
    };
    Ok(SplitDataset {
        calibration: pick(&order[..n_cal]),
        test: pick(&order[n_cal..]),
        seed,
    })
}

/// Parameters of the synthetic softmax generator.
///
/// Each sample draws a latent class `z` and per-class noise `e_k ~ N(0, 1)`.
/// The emitted logits are `signal * (signal * [k == z] + e_k) / temperature`,
/// which at `temperature == 1` is exactly the Bayes posterior over `z`.
/// Temperatures above one make the rows under-confident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub num_classes: usize,
    pub temperature: f64,
    pub label_noise: f64,
    /// Separation of the true-class logit, in noise standard deviations.
    pub signal: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub const DEFAULT_SIGNAL: f64 = 2.7;

    pub fn new(
        n: usize,
        num_classes: usize,
        temperature: f64,
        label_noise: f64,
        seed: u64,
    ) -> Self {
        Self {
            n,
            num_classes,
            temperature,
            label_noise,
            signal: Self::DEFAULT_SIGNAL,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |m: String| Err(DatasetError::InvalidSpec(m));
        if self.n < 2 {
            return fail(format!("n must be at least 2, got {}", self.n));
        }
        if self.num_classes < 2 {
            return fail(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return fail(format!(
                "label_noise must lie in [0, 1], got {}",
                self.label_noise
            ));
        }
        if !(self.signal >= 0.0 && self.signal.is_finite()) {
            return fail(format!(
                "signal must be finite and nonnegative, got {}",
                self.signal
            ));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<RecordSet, DatasetError> {
    spec.validate()?;
    let k = spec.num_classes;
    let mut rng = rng::seeded(spec.seed);
    let mut records = Vec::with_capacity(spec.n);
    let mut logits = vec![0.0; k];
    for i in 0..spec.n {
        let latent = rng.random_range(0..k);
        for (c, l) in logits.iter_mut().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            let peak = if c == latent { spec.signal } else { 0.0 };
            *l = spec.signal * (peak + noise) / spec.temperature;
        }
        let mut label = latent;
        if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
            let other = rng.random_range(0..k - 1);
            label = if other >= latent { other + 1 } else { other };
        }
        let record = ProbRecord::from_logits(format!("s{i:06}"), &logits, label)
            .map_err(|source| DatasetError::InvalidInput { index: i, source })?;
        records.push(record);
    }
    Ok(RecordSet {
        records,
        num_classes: k,
    })
}
