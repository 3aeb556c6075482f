//! Calibration and classification metrics.
//!
//! All functions are pure over a slice of [`PredictionRecord`]s. A record is
//! *correct* when its predicted label equals its true label and its
//! *confidence* is the probability on the predicted label.
//!
//! * ECE bins confidences into equal-width bins and averages the per-bin
//!   |accuracy - mean confidence| gap weighted by bin mass.
//! * ICE averages |1(correct) - confidence| per instance.
//! * MacroCE averages ICE over correct records and ICE over incorrect ones.
//! * DKL is the KL divergence from the confidence histogram of correct
//!   records to that of incorrect records. Both histograms share an
//!   equal-width partition of `[0, 1]` and receive additive smoothing before
//!   normalisation. Natural log; larger means more discriminative confidence.
//!
//! Metrics that need both correct and incorrect records are reported as
//! [`MetricValue::Undefined`] with reason [`Reason::OneSided`] rather than NaN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExperimentConfig, PredictionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reason {
    /// No correct or no incorrect predictions.
    OneSided,
    /// No replicate produced a defined value.
    NoDefinedReplicates,
}

impl Reason {
    pub fn code(self) -> &'static str {
        match self {
            Reason::OneSided => "ONE_SIDED",
            Reason::NoDefinedReplicates => "NO_DEFINED_REPLICATES",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Undefined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UndefinedMetric {
    pub status: Status,
    pub reason: Reason,
}

/// A metric that is either a number or an explicit `{status, reason}` object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Defined(f64),
    Undefined(UndefinedMetric),
}

impl MetricValue {
    pub fn undefined(reason: Reason) -> Self {
        MetricValue::Undefined(UndefinedMetric {
            status: Status::Undefined,
            reason,
        })
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Defined(v) => Some(*v),
            MetricValue::Undefined(_) => None,
        }
    }

    pub fn reason(&self) -> Option<Reason> {
        match self {
            MetricValue::Defined(_) => None,
            MetricValue::Undefined(u) => Some(u.reason),
        }
    }

    pub fn map(self, f: impl FnOnce(f64) -> f64) -> Self {
        match self {
            MetricValue::Defined(v) => MetricValue::Defined(f(v)),
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    /// `None` when the bin is empty.
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
    pub count: usize,
}

impl ReliabilityBin {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityDiagram {
    pub n_bins: usize,
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityDiagram {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Equal-width bin index for a confidence; 1.0 lands in the top bin.
pub fn bin_index(confidence: f64, n_bins: usize) -> usize {
    let b = (confidence * n_bins as f64).floor();
    if b < 0.0 {
        0
    } else {
        (b as usize).min(n_bins - 1)
    }
}

pub fn bin_predictions(records: &[PredictionRecord], n_bins: usize) -> Result<ReliabilityDiagram> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records to bin"));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be at least 1".into()));
    }
    let mut sums = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for r in records {
        let c = r.confidence();
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!(
                "confidence {c} of {} outside [0, 1]",
                r.sample_id
            )));
        }
        let b = bin_index(c, n_bins);
        sums[b] += c;
        counts[b] += 1;
        if r.is_correct() {
            correct[b] += 1;
        }
    }
    let bins = (0..n_bins)
        .map(|b| {
            let count = counts[b];
            let (mean_confidence, accuracy) = if count == 0 {
                (None, None)
            } else {
                (
                    Some(sums[b] / count as f64),
                    Some(correct[b] as f64 / count as f64),
                )
            };
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                mean_confidence,
                accuracy,
                count,
            }
        })
        .collect();
    Ok(ReliabilityDiagram { n_bins, bins })
}

pub fn ece(diagram: &ReliabilityDiagram) -> f64 {
    let n = diagram.total() as f64;
    diagram
        .bins
        .iter()
        .filter_map(|b| match (b.accuracy, b.mean_confidence) {
            (Some(acc), Some(conf)) => Some(b.count as f64 / n * (acc - conf).abs()),
            _ => None,
        })
        .sum()
}

fn instance_gap(r: &PredictionRecord) -> f64 {
    let hit = if r.is_correct() { 1.0 } else { 0.0 };
    (hit - r.confidence()).abs()
}

fn mean_gap<'a>(records: impl Iterator<Item = &'a PredictionRecord>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in records {
        sum += instance_gap(r);
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn ice(records: &[PredictionRecord]) -> Result<f64> {
    mean_gap(records.iter()).ok_or(Error::EmptyInput("no records for ICE"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroCe {
    pub ice_pos: MetricValue,
    pub ice_neg: MetricValue,
    pub macro_ce: MetricValue,
}

pub fn macro_ce(records: &[PredictionRecord]) -> Result<MacroCe> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records for MacroCE"));
    }
    let pos = mean_gap(records.iter().filter(|r| r.is_correct()));
    let neg = mean_gap(records.iter().filter(|r| !r.is_correct()));
    let one_sided = MetricValue::undefined(Reason::OneSided);
    Ok(MacroCe {
        ice_pos: pos.map_or(one_sided, MetricValue::Defined),
        ice_neg: neg.map_or(one_sided, MetricValue::Defined),
        macro_ce: match (pos, neg) {
            (Some(p), Some(n)) => MetricValue::Defined(0.5 * (p + n)),
            _ => one_sided,
        },
    })
}

/// Confidence histogram as frequencies, with `smoothing` added to every
/// bin's frequency before renormalising. Smoothing frequencies rather than
/// counts keeps the result invariant to duplicating records.
pub fn confidence_histogram<'a>(
    records: impl Iterator<Item = &'a PredictionRecord>,
    n_bins: usize,
    smoothing: f64,
) -> Vec<f64> {
    let mut h = vec![0.0; n_bins];
    let mut n = 0usize;
    for r in records {
        h[bin_index(r.confidence(), n_bins)] += 1.0;
        n += 1;
    }
    let n = n.max(1) as f64;
    let total = 1.0 + smoothing * n_bins as f64;
    h.iter_mut().for_each(|v| *v = (*v / n + smoothing) / total);
    h
}

pub fn dkl(records: &[PredictionRecord], n_bins: usize, smoothing: f64) -> Result<MetricValue> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records for DKL"));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("dkl_bins must be at least 1".into()));
    }
    if !(smoothing > 0.0) {
        return Err(Error::InvalidArgument("smoothing must be > 0".into()));
    }
    let n_correct = records.iter().filter(|r| r.is_correct()).count();
    if n_correct == 0 || n_correct == records.len() {
        return Ok(MetricValue::undefined(Reason::OneSided));
    }
    let p = confidence_histogram(records.iter().filter(|r| r.is_correct()), n_bins, smoothing);
    let q = confidence_histogram(records.iter().filter(|r| !r.is_correct()), n_bins, smoothing);
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(pb, qb)| if pb == qb { 0.0 } else { pb * (pb / qb).ln() })
        .sum();
    Ok(MetricValue::Defined(kl.max(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 over `k` labels. Labels absent from both truth and
/// predictions contribute an F1 of 0 to the mean.
pub fn classification_metrics_k(records: &[PredictionRecord], k: usize) -> Result<ClassificationMetrics> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records for classification metrics"));
    }
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fne = vec![0usize; k];
    let mut correct = 0usize;
    for r in records {
        let (pred, truth) = (r.estimate.predicted, r.true_label);
        if pred >= k || truth >= k {
            return Err(Error::InvalidArgument(format!(
                "label index out of range for K={k} in {}",
                r.sample_id
            )));
        }
        if pred == truth {
            tp[pred] += 1;
            correct += 1;
        } else {
            fp[pred] += 1;
            fne[truth] += 1;
        }
    }
    let f1_sum: f64 = (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fne[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / records.len() as f64,
        macro_f1: f1_sum / k as f64,
    })
}

/// [`classification_metrics_k`] with K taken from the probability vectors.
pub fn classification_metrics(records: &[PredictionRecord]) -> Result<ClassificationMetrics> {
    let k = records.iter().map(|r| r.estimate.k()).max().unwrap_or(0);
    classification_metrics_k(records, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMode {
    Raw,
    Normalized,
    Mixed,
}

pub fn estimate_mode(records: &[PredictionRecord]) -> EstimateMode {
    let normalized = records.iter().filter(|r| r.estimate.normalized).count();
    if normalized == records.len() {
        EstimateMode::Normalized
    } else if normalized == 0 {
        EstimateMode::Raw
    } else {
        EstimateMode::Mixed
    }
}

pub const F1_CONVENTION: &str = "macro_mean_zero_for_unseen_labels";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub ice: f64,
    pub ice_pos: MetricValue,
    pub ice_neg: MetricValue,
    pub macro_ce: MetricValue,
    pub dkl: MetricValue,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n: usize,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub estimate_mode: EstimateMode,
    pub f1_convention: String,
}

pub fn calibration_report(records: &[PredictionRecord], config: &ExperimentConfig) -> Result<CalibrationReport> {
    let diagram = bin_predictions(records, config.n_bins)?;
    let split = macro_ce(records)?;
    let cls = classification_metrics(records)?;
    let n_correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(CalibrationReport {
        ece: ece(&diagram),
        ice: ice(records)?,
        ice_pos: split.ice_pos,
        ice_neg: split.ice_neg,
        macro_ce: split.macro_ce,
        dkl: dkl(records, config.dkl_bins, config.dkl_smoothing)?,
        accuracy: cls.accuracy,
        macro_f1: cls.macro_f1,
        n: records.len(),
        n_correct,
        n_incorrect: records.len() - n_correct,
        estimate_mode: estimate_mode(records),
        f1_convention: F1_CONVENTION.to_string(),
    })
}
