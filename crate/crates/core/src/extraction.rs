//! Turn token-level log-probabilities into label probability estimates.
//!
//! A label's probability is the sum of `exp(logprob)` over every token that
//! matches one of its variants, so a label tokenised as either `Pos` or
//! `Positive` collects both. Variants missing from the distribution
//! contribute exactly zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LabelSpace, ProbabilityEstimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    /// Token string to log-probability (each `<= 0`).
    pub entries: BTreeMap<String, f64>,
    #[serde(default)]
    pub position_note: String,
}

impl TokenDistribution {
    pub fn new(entries: BTreeMap<String, f64>, position_note: impl Into<String>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("token distribution has no entries"));
        }
        if let Some((tok, lp)) = entries.iter().find(|(_, lp)| !(**lp <= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "log-probability {lp} for token {tok:?} must be <= 0"
            )));
        }
        Ok(TokenDistribution {
            entries,
            position_note: position_note.into(),
        })
    }

    /// Convenience for tests: build from `(token, probability)` pairs.
    pub fn from_probs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Self> {
        Self::new(
            pairs.into_iter().map(|(t, p)| (t.to_string(), p.ln())).collect(),
            "",
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    #[default]
    Raw,
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub estimate: ProbabilityEstimate,
    /// Raw label mass before any normalisation.
    pub label_mass: f64,
    pub absent_labels: Vec<usize>,
    /// Raw mode with zero label mass.
    pub degenerate: bool,
}

pub fn extract_label_distribution(
    dist: &TokenDistribution,
    space: &LabelSpace,
    mode: ExtractionMode,
) -> Result<Extraction> {
    if dist.entries.is_empty() {
        return Err(Error::EmptyInput("token distribution has no entries"));
    }
    let mut probs = vec![0.0; space.k()];
    let mut seen = vec![false; space.k()];
    for (token, lp) in &dist.entries {
        if let Some(label) = space.label_for_token(token) {
            probs[label] += lp.exp();
            seen[label] = true;
        }
    }
    let label_mass: f64 = probs.iter().sum();
    let absent_labels = (0..space.k()).filter(|&i| !seen[i]).collect();
    let raw = ProbabilityEstimate::new(probs, false);
    let estimate = match mode {
        ExtractionMode::Raw => raw,
        ExtractionMode::Normalized => renormalize(&raw)?,
    };
    Ok(Extraction {
        estimate,
        label_mass,
        absent_labels,
        degenerate: label_mass == 0.0,
    })
}

/// Scale an estimate to sum to one. The predicted index is preserved.
pub fn renormalize(est: &ProbabilityEstimate) -> Result<ProbabilityEstimate> {
    let total = est.mass();
    if !(total > 0.0) {
        return Err(Error::ZeroMass);
    }
    let mut out = ProbabilityEstimate::new(est.probs.iter().map(|p| p / total).collect(), true);
    // Division can merge near-ties; keep the original argmax.
    out.predicted = est.predicted;
    out.confidence = out.probs[est.predicted];
    Ok(out)
}
