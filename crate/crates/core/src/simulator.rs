//! Synthetic two-label populations with controlled miscalibration.
//!
//! Confidences come from inverse-CDF sampling of seeded uniforms, with the
//! correctness coin on a separate stream. Re-generating with a tuned
//! parameter and the same seed therefore moves every record monotonically,
//! which keeps the bisection in [`match_ece_pair`] well behaved.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::inv_beta_reg;

use crate::error::{Error, Result};
use crate::metrics::{self, bin_predictions};
use crate::model::{ConditionTag, ExperimentConfig, LabelSpace, PredictionRecord, ProbabilityEstimate};
use crate::orchestrator::{EvaluationRun, RunProvenance, SplitKind, RUN_SCHEMA_VERSION};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceDist {
    pub mean: f64,
    pub concentration: f64,
}

impl ConfidenceDist {
    fn validate(&self, field: &str) -> Result<()> {
        if !(self.mean > 0.0 && self.mean < 1.0) {
            return Err(Error::InvalidArgument(format!("{field}.mean must lie in (0, 1), got {}", self.mean)));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{field}.concentration must be positive, got {}",
                self.concentration
            )));
        }
        Ok(())
    }

    fn shifted(self, delta: f64) -> Self {
        ConfidenceDist {
            mean: self.mean + delta,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceShape {
    #[default]
    Beta,
    /// Gaussian with the Beta's variance, truncated to [0, 1].
    TruncatedGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AccuracyProfile {
    /// Correctness is a coin independent of confidence.
    Indiscriminate { p_correct: f64 },
    /// Confidence is drawn from `correct_conf_dist`; correctness then
    /// follows the accuracy of its equal-width bin.
    Conventional { per_bin_accuracies: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n: usize,
    pub correct_conf_dist: ConfidenceDist,
    pub incorrect_conf_dist: ConfidenceDist,
    pub accuracy_profile: AccuracyProfile,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub shape: ConfidenceShape,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        self.correct_conf_dist.validate("correct_conf_dist")?;
        self.incorrect_conf_dist.validate("incorrect_conf_dist")?;
        match &self.accuracy_profile {
            AccuracyProfile::Indiscriminate { p_correct } => {
                if !(0.0..=1.0).contains(p_correct) {
                    return Err(Error::InvalidArgument(format!(
                        "accuracy_profile.p_correct must lie in [0, 1], got {p_correct}"
                    )));
                }
            }
            AccuracyProfile::Conventional { per_bin_accuracies } => {
                if per_bin_accuracies.is_empty() || per_bin_accuracies.iter().any(|a| !(0.0..=1.0).contains(a)) {
                    return Err(Error::InvalidArgument(
                        "accuracy_profile.per_bin_accuracies must be a non-empty list in [0, 1]".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

const U_EPS: f64 = 1e-12;
const CONF_FLOOR: f64 = 1e-9;

fn quantile(dist: ConfidenceDist, shape: ConfidenceShape, u: f64) -> f64 {
    let u = u.clamp(U_EPS, 1.0 - U_EPS);
    let c = match shape {
        ConfidenceShape::Beta => {
            let a = dist.mean * dist.concentration;
            let b = (1.0 - dist.mean) * dist.concentration;
            inv_beta_reg(a, b, u)
        }
        ConfidenceShape::TruncatedGaussian => {
            let sd = (dist.mean * (1.0 - dist.mean) / (dist.concentration + 1.0)).sqrt();
            let std = Normal::standard();
            let lo = std.cdf(-dist.mean / sd);
            let hi = std.cdf((1.0 - dist.mean) / sd);
            dist.mean + sd * std.inverse_cdf(lo + u * (hi - lo))
        }
    };
    c.clamp(CONF_FLOOR, 1.0)
}

/// Two-label record whose predicted label carries confidence `c`.
///
/// Above 0.5 the vector is `(c, 1 - c)`; otherwise no normalized vector
/// has `c` as its strict maximum, so a raw `(c, c/2)` is emitted.
fn synth_record(i: usize, c: f64, correct: bool, seed_value: u64) -> PredictionRecord {
    let predicted = i % 2;
    let other = if c > 0.5 { 1.0 - c } else { c / 2.0 };
    let mut probs = vec![other; 2];
    probs[predicted] = c;
    let truth = if correct { predicted } else { 1 - predicted };
    PredictionRecord::new(
        format!("sim-{i:06}"),
        ProbabilityEstimate::new(probs, c > 0.5),
        truth,
        ConditionTag::independent(0, seed_value),
    )
}

struct Draws {
    coin: Vec<f64>,
    conf: Vec<f64>,
}

fn draws(spec: &ScenarioSpec) -> Draws {
    let mut coin_rng = seed::rng(seed::derive(spec.seed, "correctness"));
    let mut conf_rng = seed::rng(seed::derive(spec.seed, "confidence"));
    Draws {
        coin: (0..spec.n).map(|_| coin_rng.random::<f64>()).collect(),
        conf: (0..spec.n).map(|_| conf_rng.random::<f64>()).collect(),
    }
}

fn realize(spec: &ScenarioSpec, d: &Draws) -> Vec<PredictionRecord> {
    (0..spec.n)
        .map(|i| match &spec.accuracy_profile {
            AccuracyProfile::Indiscriminate { p_correct } => {
                let correct = d.coin[i] < *p_correct;
                let dist = if correct { spec.correct_conf_dist } else { spec.incorrect_conf_dist };
                synth_record(i, quantile(dist, spec.shape, d.conf[i]), correct, spec.seed)
            }
            AccuracyProfile::Conventional { per_bin_accuracies } => {
                let c = quantile(spec.correct_conf_dist, spec.shape, d.conf[i]);
                let acc = per_bin_accuracies[metrics::bin_index(c, per_bin_accuracies.len())];
                synth_record(i, c, d.coin[i] < acc, spec.seed)
            }
        })
        .collect()
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Vec<PredictionRecord>> {
    spec.validate()?;
    Ok(realize(spec, &draws(spec)))
}

/// Wrap a population as a run artifact for the metric and report pipeline.
pub fn scenario_run(spec: &ScenarioSpec, records: Vec<PredictionRecord>, config: &ExperimentConfig) -> EvaluationRun {
    EvaluationRun {
        schema_version: RUN_SCHEMA_VERSION,
        condition: ConditionTag::independent(0, spec.seed),
        label_space: LabelSpace::from_names(&["A", "B"]).expect("two distinct labels"),
        config: config.clone(),
        provenance: RunProvenance {
            backend: "simulator".into(),
            decode: Default::default(),
            extraction: Default::default(),
            template: "none".into(),
            split: SplitKind::Test,
            fixed_references: false,
        },
        records,
        per_reference_runs: None,
        failures: Vec::new(),
        prompts: Vec::new(),
    }
}

fn accuracy(records: &[PredictionRecord]) -> f64 {
    records.iter().filter(|r| r.is_correct()).count() as f64 / records.len() as f64
}

fn ece_of(records: &[PredictionRecord], n_bins: usize) -> f64 {
    metrics::ece(&bin_predictions(records, n_bins).expect("non-empty population"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub spec_a: ScenarioSpec,
    pub spec_b: ScenarioSpec,
    pub records_a: Vec<PredictionRecord>,
    pub records_b: Vec<PredictionRecord>,
    pub ece_gap: f64,
    pub accuracy_gap: f64,
}

const BISECTION_STEPS: usize = 60;

/// Bisection on a monotone `f` over `[lo, hi]`, returning the best point.
fn bisect(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    let mut best = if f_lo.abs() <= f_hi.abs() { (lo, f_lo) } else { (hi, f_hi) };
    if f_lo.signum() == f_hi.signum() {
        return best;
    }
    for _ in 0..BISECTION_STEPS {
        if best.1.abs() <= tol / 2.0 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid);
        if f_mid.abs() < best.1.abs() {
            best = (mid, f_mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    best
}

/// Tune the indiscriminate member of a pair until its ECE and accuracy
/// match the other member within `tolerance`. Uses 10 bins.
pub fn match_ece_pair(spec_a: &ScenarioSpec, spec_b: &ScenarioSpec, tolerance: f64) -> Result<MatchedPair> {
    match_ece_pair_with_bins(spec_a, spec_b, tolerance, 10)
}

pub fn match_ece_pair_with_bins(
    spec_a: &ScenarioSpec,
    spec_b: &ScenarioSpec,
    tolerance: f64,
    n_bins: usize,
) -> Result<MatchedPair> {
    spec_a.validate()?;
    spec_b.validate()?;
    if !(tolerance >= 0.0) {
        return Err(Error::InvalidArgument("tolerance must be non-negative".into()));
    }
    let pair = |a: &ScenarioSpec, b: &ScenarioSpec| -> MatchedPair {
        let ra = generate_scenario(a).expect("validated");
        let rb = generate_scenario(b).expect("validated");
        MatchedPair {
            ece_gap: (ece_of(&ra, n_bins) - ece_of(&rb, n_bins)).abs(),
            accuracy_gap: (accuracy(&ra) - accuracy(&rb)).abs(),
            spec_a: a.clone(),
            spec_b: b.clone(),
            records_a: ra,
            records_b: rb,
        }
    };
    let within = |m: &MatchedPair| m.ece_gap <= tolerance && m.accuracy_gap <= tolerance;

    let initial = pair(spec_a, spec_b);
    if within(&initial) {
        return Ok(initial);
    }

    let (tuned, fixed, tuned_is_a) = match (&spec_a.accuracy_profile, &spec_b.accuracy_profile) {
        (AccuracyProfile::Indiscriminate { .. }, _) => (spec_a, spec_b, true),
        (_, AccuracyProfile::Indiscriminate { .. }) => (spec_b, spec_a, false),
        _ => {
            return Err(Error::NoMatch {
                ece_gap: initial.ece_gap,
                accuracy_gap: initial.accuracy_gap,
            })
        }
    };
    let target_records = generate_scenario(fixed)?;
    let target_acc = accuracy(&target_records);
    let target_ece = ece_of(&target_records, n_bins);
    let d = draws(tuned);

    let with_p = |p: f64| {
        let mut s = tuned.clone();
        s.accuracy_profile = AccuracyProfile::Indiscriminate { p_correct: p };
        s
    };
    let (p, _) = bisect(|p| accuracy(&realize(&with_p(p), &d)) - target_acc, 0.0, 1.0, tolerance);
    let base = with_p(p);

    let with_delta = |delta: f64| {
        let mut s = base.clone();
        s.correct_conf_dist = base.correct_conf_dist.shifted(delta);
        s.incorrect_conf_dist = base.incorrect_conf_dist.shifted(delta);
        s
    };
    let margin = 1e-3;
    let lo = margin - base.correct_conf_dist.mean.min(base.incorrect_conf_dist.mean);
    let hi = 1.0 - margin - base.correct_conf_dist.mean.max(base.incorrect_conf_dist.mean);
    // ECE is V-shaped around the shift that makes mean confidence equal p.
    let pivot = (p - base.correct_conf_dist.mean).clamp(lo, hi);
    let mut gap = |delta: f64| ece_of(&realize(&with_delta(delta), &d), n_bins) - target_ece;
    let upper = bisect(&mut gap, pivot, hi, tolerance);
    let lower = bisect(&mut gap, lo, pivot, tolerance);
    let (delta, _) = if upper.1.abs() <= lower.1.abs() { upper } else { lower };
    let tuned_spec = with_delta(delta);

    let matched = if tuned_is_a { pair(&tuned_spec, fixed) } else { pair(fixed, &tuned_spec) };
    if within(&matched) {
        Ok(matched)
    } else {
        Err(Error::NoMatch {
            ece_gap: matched.ece_gap,
            accuracy_gap: matched.accuracy_gap,
        })
    }
}

/// Indiscriminate and conventional specs for the same-ECE, same-accuracy
/// demonstration. The conventional side is overconfident by 0.15 in every
/// bin; the indiscriminate side starts at an arbitrary point for tuning.
pub fn same_ece_specs(n: usize, seed_value: u64) -> (ScenarioSpec, ScenarioSpec) {
    let conventional = ScenarioSpec {
        n,
        correct_conf_dist: ConfidenceDist { mean: 0.7, concentration: 6.0 },
        incorrect_conf_dist: ConfidenceDist { mean: 0.7, concentration: 6.0 },
        accuracy_profile: AccuracyProfile::Conventional {
            per_bin_accuracies: (0..10).map(|b| (b as f64 / 10.0 + 0.05 - 0.15).max(0.0)).collect(),
        },
        seed: seed::derive(seed_value, "conventional"),
        shape: ConfidenceShape::Beta,
    };
    let indiscriminate = ScenarioSpec {
        n,
        correct_conf_dist: ConfidenceDist { mean: 0.7, concentration: 30.0 },
        incorrect_conf_dist: ConfidenceDist { mean: 0.7, concentration: 30.0 },
        accuracy_profile: AccuracyProfile::Indiscriminate { p_correct: 0.5 },
        seed: seed::derive(seed_value, "indiscriminate"),
        shape: ConfidenceShape::Beta,
    };
    (indiscriminate, conventional)
}

pub const NARROW_CONCENTRATION: f64 = 200.0;
pub const WIDE_CONCENTRATION: f64 = 8.0;

/// Correct confidences around 0.65 and incorrect around 0.45, once narrow
/// and once wide.
pub fn variance_specs(n: usize, seed_value: u64) -> (ScenarioSpec, ScenarioSpec) {
    let make = |concentration: f64, tag: &str| ScenarioSpec {
        n,
        correct_conf_dist: ConfidenceDist { mean: 0.65, concentration },
        incorrect_conf_dist: ConfidenceDist { mean: 0.45, concentration },
        accuracy_profile: AccuracyProfile::Indiscriminate { p_correct: 0.6 },
        seed: seed::derive(seed_value, tag),
        shape: ConfidenceShape::Beta,
    };
    (make(NARROW_CONCENTRATION, "narrow"), make(WIDE_CONCENTRATION, "wide"))
}
