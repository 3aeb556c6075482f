//! Deterministic mock model.
//!
//! A [`MockModelSpec`] either lists per-sample label distributions or
//! describes a generative rule. Every draw is seeded from the spec seed and
//! the request's identifiers, so the same request always yields the same
//! distribution regardless of thread or call order.
//!
//! Comparative requests can carry two kinds of injected comparison bias:
//!
//! * an explicit table of zero-sum vectors, row `(j - 1) mod len` added to
//!   the base distribution for reference set `j`;
//! * Dirichlet mixing `p = (1 - s) * base + s * q` with
//!   `q ~ Dir(concentration * base)`, whose expectation is exactly `base`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendRequest, DecodeStrategy};
use crate::error::{Error, Result};
use crate::extraction::TokenDistribution;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletBias {
    /// Mixing weight in `[0, 1]`.
    pub strength: f64,
    pub concentration: f64,
}

fn default_mass() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeRule {
    /// Logit weight on the true label.
    pub true_label_weight: f64,
    /// Standard deviation of per-sample Gaussian logit noise.
    pub noise_weight: f64,
    /// Total probability placed on label tokens; the rest goes to a filler token.
    #[serde(default = "default_mass")]
    pub label_mass: f64,
    /// Relative comparison bias: reference set `j` scales label `c` by
    /// `1 + bias_table[(j - 1) % rows][c]`. Every column must average to zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bias_table: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dirichlet_bias: Option<DirichletBias>,
    /// Probability that the answer at position `p` peaks on the true label.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub position_accuracy: Vec<f64>,
}

fn default_filler() -> String {
    "<other>".to_string()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockModelSpec {
    /// Sample id to label probabilities (sum <= 1).
    #[serde(default)]
    pub table: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub rule: Option<GenerativeRule>,
    /// Gold labels used by the generative rule.
    #[serde(default)]
    pub truth: BTreeMap<String, usize>,
    /// Sample ids that always fail with a non-retryable transport error.
    #[serde(default)]
    pub fail: BTreeSet<String>,
    /// Sample ids that fail this many times before succeeding.
    #[serde(default)]
    pub transient_failures: BTreeMap<String, u32>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_filler")]
    pub filler_token: String,
}

impl MockModelSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let spec: MockModelSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (id, row) in &self.table {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || sum > 1.0 + 1e-9 {
                return Err(Error::InvalidArgument(format!("mock table row {id} is not a sub-distribution")));
            }
        }
        if let Some(rule) = &self.rule {
            if !(rule.label_mass > 0.0 && rule.label_mass <= 1.0) {
                return Err(Error::InvalidArgument("label_mass must be in (0, 1]".into()));
            }
            if let Some(first) = rule.bias_table.first() {
                let k = first.len();
                if rule.bias_table.iter().any(|r| r.len() != k) {
                    return Err(Error::InvalidArgument("bias_table rows differ in length".into()));
                }
                if rule.bias_table.iter().flatten().any(|e| !(*e > -1.0) || !e.is_finite()) {
                    return Err(Error::InvalidArgument("bias_table entries must be finite and > -1".into()));
                }
                let rows = rule.bias_table.len() as f64;
                for c in 0..k {
                    let mean = rule.bias_table.iter().map(|r| r[c]).sum::<f64>() / rows;
                    if mean.abs() > 1e-9 {
                        return Err(Error::InvalidArgument(format!(
                            "bias_table column {c} averages {mean}, expected zero"
                        )));
                    }
                }
            }
            if let Some(d) = &rule.dirichlet_bias {
                if !(0.0..=1.0).contains(&d.strength) || !(d.concentration > 0.0) {
                    return Err(Error::InvalidArgument("dirichlet_bias needs strength in [0,1] and concentration > 0".into()));
                }
            }
            if rule.position_accuracy.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::InvalidArgument("position_accuracy entries must be in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Mock backend. Safe to share across threads.
#[derive(Debug)]
pub struct MockModel {
    spec: MockModelSpec,
    attempts: Mutex<BTreeMap<String, u32>>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl MockModel {
    pub fn new(spec: MockModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(MockModel {
            spec,
            attempts: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn spec(&self) -> &MockModelSpec {
        &self.spec
    }

    /// Label probabilities before any comparison bias.
    pub fn base_distribution(&self, target_id: &str, k: usize, position: usize) -> Result<Vec<f64>, BackendError> {
        if let Some(row) = self.spec.table.get(target_id) {
            if row.len() != k {
                return Err(BackendError::NotCovered(format!("table row {target_id} has {} labels, expected {k}", row.len())));
            }
            return Ok(row.clone());
        }
        let rule = self
            .spec
            .rule
            .as_ref()
            .ok_or_else(|| BackendError::NotCovered(format!("no table row or rule for {target_id}")))?;
        let truth = *self
            .spec
            .truth
            .get(target_id)
            .ok_or_else(|| BackendError::NotCovered(format!("no gold label for {target_id}")))?;
        if truth >= k {
            return Err(BackendError::NotCovered(format!("gold label {truth} of {target_id} outside K={k}")));
        }
        let sample_seed = seed::derive(self.spec.seed, target_id);
        let mut peak = truth;
        if let Some(acc) = rule.position_accuracy.get(position - 1) {
            let mut rng = seed::rng(seed::derive_index(sample_seed, "position", position as u64));
            if rng.random::<f64>() >= *acc && k > 1 {
                peak = (truth + 1 + rng.random_range(0..k - 1)) % k;
            }
        }
        let mut rng = seed::rng(seed::derive(sample_seed, "noise"));
        let logits: Vec<f64> = (0..k)
            .map(|c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let hit = if c == peak { rule.true_label_weight } else { 0.0 };
                hit + rule.noise_weight * z
            })
            .collect();
        Ok(softmax(&logits).into_iter().map(|p| p * rule.label_mass).collect())
    }

    /// Label probabilities after comparison bias for this request.
    pub fn label_probabilities(&self, req: &BackendRequest) -> Result<Vec<f64>, BackendError> {
        let k = req.label_space.k();
        let mut probs = self.base_distribution(&req.context.target_id, k, req.answer_position)?;
        let (Some(rule), Some(j)) = (&self.spec.rule, req.context.reference_set) else {
            return Ok(probs);
        };
        if !rule.bias_table.is_empty() {
            let row = &rule.bias_table[(j - 1) % rule.bias_table.len()];
            if row.len() != k {
                return Err(BackendError::NotCovered(format!("bias_table has {} labels, expected {k}", row.len())));
            }
            for (p, e) in probs.iter_mut().zip(row) {
                *p *= 1.0 + e;
            }
            if probs.iter().any(|p| *p > 1.0) {
                return Err(BackendError::NotCovered(
                    "biased label probability exceeds 1; lower label_mass or the bias".into(),
                ));
            }
        }
        if let Some(d) = &rule.dirichlet_bias {
            let mass: f64 = probs.iter().sum();
            if mass > 0.0 && d.strength > 0.0 {
                let key = format!("{}|{}", req.context.target_id, req.context.reference_ids.join(","));
                let mut rng = seed::rng(seed::derive(self.spec.seed ^ 0x5eed, &key));
                let draws: Vec<f64> = probs
                    .iter()
                    .map(|p| {
                        let shape = (d.concentration * p / mass).max(1e-6);
                        Gamma::new(shape, 1.0).expect("positive shape").sample(&mut rng)
                    })
                    .collect();
                let total: f64 = draws.iter().sum();
                if total > 0.0 {
                    for (p, g) in probs.iter_mut().zip(draws) {
                        *p = (1.0 - d.strength) * *p + d.strength * mass * g / total;
                    }
                }
            }
        }
        Ok(probs)
    }

    fn check_failures(&self, req: &BackendRequest) -> Result<(), BackendError> {
        let id = &req.context.target_id;
        if self.spec.fail.contains(id) {
            return Err(BackendError::Transport {
                message: format!("mock configured to fail {id}"),
                attempts: 1,
                retryable: false,
            });
        }
        if let Some(limit) = self.spec.transient_failures.get(id) {
            let key = format!("{id}|{:?}|{}", req.context.reference_set, req.answer_position);
            let mut attempts = self.attempts.lock().expect("attempt counter poisoned");
            let seen = attempts.entry(key).or_insert(0);
            if *seen < *limit {
                *seen += 1;
                return Err(BackendError::Transport {
                    message: format!("mock transient failure {} of {limit} for {id}", *seen),
                    attempts: 1,
                    retryable: true,
                });
            }
        }
        Ok(())
    }
}

impl Backend for MockModel {
    fn identity(&self) -> String {
        format!("mock(seed={})", self.spec.seed)
    }

    fn score_first_answer(&self, req: &BackendRequest) -> Result<TokenDistribution, BackendError> {
        self.check_failures(req)?;
        let probs = self.label_probabilities(req)?;
        let mut entries = BTreeMap::new();
        let space = &req.label_space;
        for (label, p) in space.labels().iter().zip(&probs) {
            let token = label.variants[0].clone();
            match req.decode {
                DecodeStrategy::FirstToken if *p > 0.0 => {
                    entries.insert(token, p.ln());
                }
                DecodeStrategy::FirstToken => {}
                DecodeStrategy::PerLabelScoring => {
                    entries.insert(token, p.max(f64::MIN_POSITIVE).ln());
                }
            }
        }
        if req.decode == DecodeStrategy::FirstToken {
            let rest = 1.0 - probs.iter().sum::<f64>();
            if rest > 1e-12 {
                entries.insert(self.spec.filler_token.clone(), rest.ln());
            }
        }
        TokenDistribution::new(entries, format!("answer {}", req.answer_position))
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }
}
