//! Affine post-hoc calibration of probability vectors.
//!
//! A calibrator maps a normalized estimate `p` to `softmax(W p + b)`. The
//! map acts on probabilities, so even `W = I, b = 0` changes the estimate.
//! The comparative calibrator sums one affine term per reference set before
//! a single softmax.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PredictionRecord, ProbabilityEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibratorKind {
    Temperature,
    Vector,
    Matrix,
}

impl CalibratorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CalibratorKind::Temperature => "temperature",
            CalibratorKind::Vector => "vector",
            CalibratorKind::Matrix => "matrix",
        }
    }

    /// Free parameters of one calibrator over `k` labels.
    pub fn n_parameters(self, k: usize) -> usize {
        match self {
            CalibratorKind::Temperature => 1,
            CalibratorKind::Vector => 2 * k,
            CalibratorKind::Matrix => k * k + k,
        }
    }
}

/// `weights` holds the free weights: one scale `1/T` for temperature, the
/// diagonal for vector, the full row-major matrix for matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineCalibrator {
    pub kind: CalibratorKind,
    pub k: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineCalibrator {
    pub fn identity(kind: CalibratorKind, k: usize) -> Self {
        let weights = match kind {
            CalibratorKind::Temperature => vec![1.0],
            CalibratorKind::Vector => vec![1.0; k],
            CalibratorKind::Matrix => identity_matrix(k, 1.0),
        };
        AffineCalibrator {
            kind,
            k,
            weights,
            bias: vec![0.0; k],
        }
    }

    pub fn temperature(t: f64, k: usize) -> Result<Self> {
        let cal = AffineCalibrator {
            kind: CalibratorKind::Temperature,
            k,
            weights: vec![1.0 / t],
            bias: vec![0.0; k],
        };
        cal.validate()?;
        Ok(cal)
    }

    pub fn vector(diagonal: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let cal = AffineCalibrator {
            kind: CalibratorKind::Vector,
            k: diagonal.len(),
            weights: diagonal,
            bias,
        };
        cal.validate()?;
        Ok(cal)
    }

    pub fn matrix(k: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let cal = AffineCalibrator {
            kind: CalibratorKind::Matrix,
            k,
            weights,
            bias,
        };
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.kind {
            CalibratorKind::Temperature => 1,
            CalibratorKind::Vector => self.k,
            CalibratorKind::Matrix => self.k * self.k,
        };
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("calibrator needs K >= 2, got {}", self.k)));
        }
        if self.weights.len() != want || self.bias.len() != self.k {
            return Err(Error::InvalidArgument(format!(
                "{} calibrator over K={} needs {want} weights and {} biases, got {} and {}",
                self.kind.as_str(),
                self.k,
                self.k,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("calibrator parameters must be finite".into()));
        }
        if self.kind == CalibratorKind::Temperature {
            if self.weights[0] <= 0.0 {
                return Err(Error::InvalidArgument("temperature must be positive".into()));
            }
            if self.bias.iter().any(|b| *b != 0.0) {
                return Err(Error::InvalidArgument("temperature scaling has no bias".into()));
            }
        }
        Ok(())
    }

    /// `T`, for temperature calibrators.
    pub fn temperature_value(&self) -> Option<f64> {
        (self.kind == CalibratorKind::Temperature).then(|| 1.0 / self.weights[0])
    }

    /// Full `K x K` weight matrix, row-major.
    pub fn weight_matrix(&self) -> Vec<f64> {
        match self.kind {
            CalibratorKind::Temperature => identity_matrix(self.k, self.weights[0]),
            CalibratorKind::Vector => {
                let mut w = vec![0.0; self.k * self.k];
                for (i, d) in self.weights.iter().enumerate() {
                    w[i * self.k + i] = *d;
                }
                w
            }
            CalibratorKind::Matrix => self.weights.clone(),
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.kind.n_parameters(self.k)
    }

    /// `W p + b`.
    pub fn logits(&self, p: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.k];
        add_logits(self.kind, self.k, &self.parameters(), p, &mut z);
        z
    }

    /// Optimisation coordinates: `ln(1/T)` for temperature, otherwise the
    /// weights followed by the biases.
    pub fn parameters(&self) -> Vec<f64> {
        match self.kind {
            CalibratorKind::Temperature => vec![self.weights[0].ln()],
            _ => self.weights.iter().chain(&self.bias).copied().collect(),
        }
    }

    pub fn from_parameters(kind: CalibratorKind, k: usize, params: &[f64]) -> Result<Self> {
        if params.len() != kind.n_parameters(k) {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                kind.n_parameters(k),
                params.len()
            )));
        }
        let (weights, bias) = match kind {
            CalibratorKind::Temperature => (vec![params[0].exp()], vec![0.0; k]),
            _ => {
                let split = params.len() - k;
                (params[..split].to_vec(), params[split..].to_vec())
            }
        };
        let cal = AffineCalibrator { kind, k, weights, bias };
        cal.validate()?;
        Ok(cal)
    }
}

fn identity_matrix(k: usize, scale: f64) -> Vec<f64> {
    let mut w = vec![0.0; k * k];
    for i in 0..k {
        w[i * k + i] = scale;
    }
    w
}

fn add_logits(kind: CalibratorKind, k: usize, params: &[f64], p: &[f64], z: &mut [f64]) {
    match kind {
        CalibratorKind::Temperature => {
            let s = params[0].exp();
            for (zi, pi) in z.iter_mut().zip(p) {
                *zi += s * pi;
            }
        }
        CalibratorKind::Vector => {
            for a in 0..k {
                z[a] += params[a] * p[a] + params[k + a];
            }
        }
        CalibratorKind::Matrix => {
            for a in 0..k {
                let row = &params[a * k..(a + 1) * k];
                z[a] += row.iter().zip(p).map(|(w, x)| w * x).sum::<f64>() + params[k * k + a];
            }
        }
    }
}

fn add_gradient(kind: CalibratorKind, k: usize, params: &[f64], p: &[f64], dz: &[f64], grad: &mut [f64]) {
    match kind {
        CalibratorKind::Temperature => {
            let s = params[0].exp();
            grad[0] += s * dz.iter().zip(p).map(|(d, x)| d * x).sum::<f64>();
        }
        CalibratorKind::Vector => {
            for a in 0..k {
                grad[a] += dz[a] * p[a];
                grad[k + a] += dz[a];
            }
        }
        CalibratorKind::Matrix => {
            for a in 0..k {
                for c in 0..k {
                    grad[a * k + c] += dz[a] * p[c];
                }
                grad[k * k + a] += dz[a];
            }
        }
    }
}

/// `‖W − a·I‖² + ‖b‖²` and its gradient, added into `grad` scaled by `weight`.
fn add_l2(kind: CalibratorKind, k: usize, params: &[f64], anchor: f64, weight: f64, grad: &mut [f64]) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    match kind {
        CalibratorKind::Temperature => {
            let s = params[0].exp();
            grad[0] += weight * 2.0 * k as f64 * (s - anchor) * s;
            weight * k as f64 * (s - anchor).powi(2)
        }
        CalibratorKind::Vector | CalibratorKind::Matrix => {
            let n_w = params.len() - k;
            let mut total = 0.0;
            for (i, v) in params.iter().enumerate() {
                let target = if i < n_w && (kind == CalibratorKind::Vector || i / k == i % k) {
                    anchor
                } else {
                    0.0
                };
                total += (v - target).powi(2);
                grad[i] += weight * 2.0 * (v - target);
            }
            weight * total
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn check_estimate(est: &ProbabilityEstimate, k: usize) -> Result<()> {
    if est.k() != k {
        return Err(Error::InvalidArgument(format!(
            "estimate has {} labels, calibrator expects {k}",
            est.k()
        )));
    }
    if !est.normalized {
        return Err(Error::InvalidArgument("estimate must be normalized before calibration".into()));
    }
    Ok(())
}

pub fn apply_affine(cal: &AffineCalibrator, est: &ProbabilityEstimate) -> Result<ProbabilityEstimate> {
    check_estimate(est, cal.k)?;
    Ok(ProbabilityEstimate::new(softmax(&cal.logits(&est.probs)), true))
}

/// Learning problem over J additive blocks sharing one softmax.
struct Problem<'a> {
    kind: CalibratorKind,
    k: usize,
    blocks: Vec<Vec<&'a [f64]>>,
    labels: &'a [usize],
    l2_weight: f64,
    /// Diagonal the l2 term pulls each block towards.
    anchor: f64,
}

impl Problem<'_> {
    fn block_len(&self) -> usize {
        self.kind.n_parameters(self.k)
    }

    fn objective(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let n = self.labels.len();
        let np = self.block_len();
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        let mut z = vec![0.0; self.k];
        let mut dz = vec![0.0; self.k];
        for (i, &y) in self.labels.iter().enumerate() {
            z.iter_mut().for_each(|v| *v = 0.0);
            for (j, block) in self.blocks.iter().enumerate() {
                add_logits(self.kind, self.k, &params[j * np..(j + 1) * np], block[i], &mut z);
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - z[y];
            for a in 0..self.k {
                dz[a] = ((z[a] - lse).exp() - if a == y { 1.0 } else { 0.0 }) / n as f64;
            }
            for (j, block) in self.blocks.iter().enumerate() {
                let range = j * np..(j + 1) * np;
                add_gradient(self.kind, self.k, &params[range.clone()], block[i], &dz, &mut grad[range]);
            }
        }
        loss /= n as f64;
        for j in 0..self.blocks.len() {
            let range = j * np..(j + 1) * np;
            loss += add_l2(self.kind, self.k, &params[range.clone()], self.anchor, self.l2_weight, &mut grad[range]);
        }
        (loss, grad)
    }
}

fn single_problem<'a>(
    kind: CalibratorKind,
    estimates: &'a [ProbabilityEstimate],
    labels: &'a [usize],
    l2_weight: f64,
) -> Result<Problem<'a>> {
    let k = estimates.first().ok_or(Error::EmptyInput("no validation estimates"))?.k();
    check_data(estimates, labels, k)?;
    Ok(Problem {
        kind,
        k,
        blocks: vec![estimates.iter().map(|e| e.probs.as_slice()).collect()],
        labels,
        l2_weight,
        anchor: 1.0,
    })
}

fn check_data(estimates: &[ProbabilityEstimate], labels: &[usize], k: usize) -> Result<()> {
    if estimates.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} estimates but {} labels",
            estimates.len(),
            labels.len()
        )));
    }
    if estimates.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} validation samples for K={k}",
            estimates.len()
        )));
    }
    for e in estimates {
        check_estimate(e, k)?;
        if e.probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite probability".into()));
        }
    }
    if let Some(y) = labels.iter().find(|y| **y >= k) {
        return Err(Error::InvalidArgument(format!("label {y} outside 0..{k}")));
    }
    Ok(())
}

/// Mean cross-entropy of `cal` on the data, plus the l2 term.
pub fn cross_entropy(
    cal: &AffineCalibrator,
    estimates: &[ProbabilityEstimate],
    labels: &[usize],
    l2_weight: f64,
) -> Result<f64> {
    Ok(single_problem(cal.kind, estimates, labels, l2_weight)?.objective(&cal.parameters()).0)
}

/// Analytic gradient with respect to [`AffineCalibrator::parameters`].
pub fn gradient(
    cal: &AffineCalibrator,
    estimates: &[ProbabilityEstimate],
    labels: &[usize],
    l2_weight: f64,
) -> Result<Vec<f64>> {
    Ok(single_problem(cal.kind, estimates, labels, l2_weight)?.objective(&cal.parameters()).1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iters: usize,
    pub learning_rate: f64,
    pub tolerance: f64,
    pub l2_weight: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iters: 500,
            learning_rate: 0.1,
            tolerance: 1e-7,
            l2_weight: 0.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0
            || !(self.learning_rate > 0.0)
            || !(self.tolerance > 0.0)
            || !(self.l2_weight >= 0.0)
        {
            return Err(Error::InvalidArgument(format!("invalid fit config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Loss before the first step, then after every accepted step.
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_learning_rate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }
}

// Enough halvings to drive any finite rate below the smallest subnormal.
const MAX_HALVINGS: usize = 1100;

fn descend(problem: &Problem<'_>, init: Vec<f64>, cfg: &FitConfig) -> Result<(Vec<f64>, FitReport)> {
    cfg.validate()?;
    let mut params = init;
    let (mut loss, mut grad) = problem.objective(&params);
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration: 0, loss });
    }
    let mut losses = vec![loss];
    let mut lr = cfg.learning_rate;
    let mut converged = false;
    let mut iterations = 0;
    'outer: for it in 1..=cfg.max_iters {
        iterations = it;
        let mut last_rejected = loss;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - lr * g).collect();
            let (cl, cg) = problem.objective(&cand);
            if cl.is_finite() && cl <= loss {
                let delta = loss - cl;
                params = cand;
                loss = cl;
                grad = cg;
                losses.push(loss);
                if delta < cfg.tolerance {
                    converged = true;
                    break 'outer;
                }
                continue 'outer;
            }
            last_rejected = cl;
            lr *= 0.5;
        }
        if !last_rejected.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                loss: last_rejected,
            });
        }
        converged = true;
        break;
    }
    Ok((
        params,
        FitReport {
            losses,
            iterations,
            converged,
            final_learning_rate: lr,
            warnings: Vec::new(),
        },
    ))
}

fn label_warnings(labels: &[usize]) -> Vec<String> {
    let first = labels.first();
    if labels.iter().all(|y| Some(y) == first) {
        vec![format!(
            "validation labels are all class {}; the fit is degenerate",
            first.copied().unwrap_or(0)
        )]
    } else {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub calibrator: AffineCalibrator,
    pub report: FitReport,
}

/// Minimise mean cross-entropy by gradient descent from the identity map.
pub fn fit_affine(
    estimates: &[ProbabilityEstimate],
    labels: &[usize],
    kind: CalibratorKind,
    cfg: &FitConfig,
) -> Result<AffineFit> {
    let problem = single_problem(kind, estimates, labels, cfg.l2_weight)?;
    let init = AffineCalibrator::identity(kind, problem.k).parameters();
    let (params, mut report) = descend(&problem, init, cfg)?;
    report.warnings = label_warnings(labels);
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(AffineFit {
        calibrator: AffineCalibrator::from_parameters(kind, problem.k, &params)?,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStrategy {
    /// Each `(W_j, b_j)` fitted alone on run j.
    Independent,
    /// All blocks fitted together through the summed logits, starting from
    /// `W_j = I / J`.
    Joint,
    /// One block fitted on the mean of the J estimates and shared as
    /// `(W / J, b / J)`, so the summed logits equal `W·p̄ + b`.
    #[default]
    Tied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparativeCalibrator {
    pub kind: CalibratorKind,
    pub k: usize,
    pub strategy: FitStrategy,
    pub per_reference: BTreeMap<usize, AffineCalibrator>,
}

impl ComparativeCalibrator {
    pub fn new(per_reference: BTreeMap<usize, AffineCalibrator>, strategy: FitStrategy) -> Result<Self> {
        let first = per_reference
            .values()
            .next()
            .ok_or(Error::EmptyInput("comparative calibrator needs at least one reference set"))?;
        let (kind, k) = (first.kind, first.k);
        if per_reference.keys().copied().ne(1..=per_reference.len()) {
            return Err(Error::InvalidArgument("reference-set keys must be exactly 1..J".into()));
        }
        for cal in per_reference.values() {
            cal.validate()?;
            if cal.kind != kind || cal.k != k {
                return Err(Error::InvalidArgument("calibrators disagree on kind or K".into()));
            }
        }
        Ok(ComparativeCalibrator {
            kind,
            k,
            strategy,
            per_reference,
        })
    }

    pub fn j(&self) -> usize {
        self.per_reference.len()
    }

    pub fn n_parameters(&self) -> usize {
        self.per_reference.values().map(AffineCalibrator::n_parameters).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparativeFit {
    pub calibrator: ComparativeCalibrator,
    pub reports: BTreeMap<usize, FitReport>,
}

fn check_keys<T>(map: &BTreeMap<usize, T>) -> Result<()> {
    if map.is_empty() {
        return Err(Error::EmptyInput("no per-reference runs"));
    }
    if map.keys().copied().ne(1..=map.len()) {
        return Err(Error::InvalidArgument("reference-set keys must be exactly 1..J".into()));
    }
    Ok(())
}

/// K and the shared labels, after checking every run covers the same samples.
fn check_aligned(per_reference: &BTreeMap<usize, (Vec<ProbabilityEstimate>, Vec<usize>)>) -> Result<(usize, &[usize])> {
    let tag = |j: usize| move |e: Error| Error::ReferenceSet { reference_set: j, source: Box::new(e) };
    let (first_est, labels) = &per_reference[&1];
    let k = first_est.first().ok_or(Error::EmptyInput("no validation estimates"))?.k();
    for (&j, (est, l)) in per_reference {
        check_data(est, l, k).map_err(tag(j))?;
        if l != labels {
            return Err(tag(j)(Error::InvalidArgument(
                "tied and joint fitting need the same samples, in the same order, for every j".into(),
            )));
        }
    }
    Ok((k, labels))
}

/// Fit one affine block per reference set.
pub fn fit_comparative(
    per_reference: &BTreeMap<usize, (Vec<ProbabilityEstimate>, Vec<usize>)>,
    kind: CalibratorKind,
    cfg: &FitConfig,
    strategy: FitStrategy,
) -> Result<ComparativeFit> {
    check_keys(per_reference)?;
    let tag = |j: usize| move |e: Error| Error::ReferenceSet { reference_set: j, source: Box::new(e) };
    match strategy {
        FitStrategy::Independent => {
            let mut cals = BTreeMap::new();
            let mut reports = BTreeMap::new();
            for (&j, (est, labels)) in per_reference {
                let fit = fit_affine(est, labels, kind, cfg).map_err(tag(j))?;
                cals.insert(j, fit.calibrator);
                reports.insert(j, fit.report);
            }
            Ok(ComparativeFit {
                calibrator: ComparativeCalibrator::new(cals, strategy)?,
                reports,
            })
        }
        FitStrategy::Tied => {
            let (_, labels) = check_aligned(per_reference)?;
            let j_count = per_reference.len() as f64;
            let fit = fit_affine(&mean_estimates(per_reference), labels, kind, cfg)?;
            let mut shared = fit.calibrator;
            shared.weights.iter_mut().for_each(|w| *w /= j_count);
            shared.bias.iter_mut().for_each(|b| *b /= j_count);
            let cals = per_reference.keys().map(|&j| (j, shared.clone())).collect();
            let reports = per_reference.keys().map(|&j| (j, fit.report.clone())).collect();
            Ok(ComparativeFit {
                calibrator: ComparativeCalibrator::new(cals, strategy)?,
                reports,
            })
        }
        FitStrategy::Joint => {
            let (k, labels) = check_aligned(per_reference)?;
            let j_count = per_reference.len();
            let problem = Problem {
                kind,
                k,
                blocks: per_reference
                    .values()
                    .map(|(est, _)| est.iter().map(|e| e.probs.as_slice()).collect())
                    .collect(),
                labels,
                l2_weight: cfg.l2_weight,
                anchor: 1.0 / j_count as f64,
            };
            let start = match kind {
                CalibratorKind::Temperature => AffineCalibrator::temperature(j_count as f64, k)?,
                CalibratorKind::Vector => AffineCalibrator::vector(vec![1.0 / j_count as f64; k], vec![0.0; k])?,
                CalibratorKind::Matrix => AffineCalibrator::matrix(k, identity_matrix(k, 1.0 / j_count as f64), vec![0.0; k])?,
            }
            .parameters();
            let init: Vec<f64> = (0..j_count).flat_map(|_| start.iter().copied()).collect();
            let (params, mut report) = descend(&problem, init, cfg)?;
            report.warnings = label_warnings(labels);
            let np = kind.n_parameters(k);
            let cals = (1..=j_count)
                .map(|j| Ok((j, AffineCalibrator::from_parameters(kind, k, &params[(j - 1) * np..j * np])?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let reports = (1..=j_count).map(|j| (j, report.clone())).collect();
            Ok(ComparativeFit {
                calibrator: ComparativeCalibrator::new(cals, strategy)?,
                reports,
            })
        }
    }
}

fn mean_estimates(per_reference: &BTreeMap<usize, (Vec<ProbabilityEstimate>, Vec<usize>)>) -> Vec<ProbabilityEstimate> {
    let j_count = per_reference.len() as f64;
    let (first, _) = &per_reference[&1];
    (0..first.len())
        .map(|i| {
            let mut m = vec![0.0; first[i].k()];
            for (est, _) in per_reference.values() {
                for (mc, p) in m.iter_mut().zip(&est[i].probs) {
                    *mc += p / j_count;
                }
            }
            ProbabilityEstimate::new(m, true)
        })
        .collect()
}

/// `softmax(Σ_j (W_j p_j + b_j))`.
pub fn apply_comparative(
    cal: &ComparativeCalibrator,
    per_reference_estimates: &BTreeMap<usize, ProbabilityEstimate>,
) -> Result<ProbabilityEstimate> {
    if per_reference_estimates.keys().ne(cal.per_reference.keys()) {
        return Err(Error::InvalidArgument(format!(
            "estimate keys {:?} do not match calibrator keys {:?}",
            per_reference_estimates.keys().collect::<Vec<_>>(),
            cal.per_reference.keys().collect::<Vec<_>>()
        )));
    }
    let mut z = vec![0.0; cal.k];
    for (j, block) in &cal.per_reference {
        let est = &per_reference_estimates[j];
        check_estimate(est, cal.k)?;
        for (zi, li) in z.iter_mut().zip(block.logits(&est.probs)) {
            *zi += li;
        }
    }
    Ok(ProbabilityEstimate::new(softmax(&z), true))
}

/// Calibrated copies of `records`, tagged with the calibrator kind.
pub fn calibrate_records(cal: &AffineCalibrator, records: &[PredictionRecord]) -> Result<Vec<PredictionRecord>> {
    records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            out.estimate = apply_affine(cal, &r.estimate)?;
            out.condition.calibrated = Some(cal.kind.as_str().to_string());
            out.diagnostics = None;
            Ok(out)
        })
        .collect()
}

/// Calibrate aligned per-reference runs into one record per sample, in the
/// order of run 1.
pub fn calibrate_comparative_records(
    cal: &ComparativeCalibrator,
    per_reference_runs: &BTreeMap<usize, Vec<PredictionRecord>>,
) -> Result<Vec<PredictionRecord>> {
    check_keys(per_reference_runs)?;
    let lookup: BTreeMap<usize, BTreeMap<&str, &PredictionRecord>> = per_reference_runs
        .iter()
        .map(|(j, run)| (*j, run.iter().map(|r| (r.sample_id.as_str(), r)).collect()))
        .collect();
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for base in &per_reference_runs[&1] {
        let mut ests = BTreeMap::new();
        for (j, map) in &lookup {
            match map.get(base.sample_id.as_str()) {
                Some(r) => {
                    ests.insert(*j, r.estimate.clone());
                }
                None => missing.push(base.sample_id.clone()),
            }
        }
        if ests.len() != lookup.len() {
            continue;
        }
        let mut rec = base.clone();
        rec.estimate = apply_comparative(cal, &ests)?;
        rec.condition.reference_set_id = None;
        rec.condition.aggregated_over = Some(cal.j());
        rec.condition.calibrated = Some(format!("comparative-{}", cal.kind.as_str()));
        rec.diagnostics = None;
        out.push(rec);
    }
    if !missing.is_empty() || per_reference_runs.values().any(|r| r.len() != out.len()) {
        missing.sort();
        missing.dedup();
        return Err(Error::Alignment { missing });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn est(p: &[f64]) -> ProbabilityEstimate {
        ProbabilityEstimate::new(p.to_vec(), true)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_is_not_a_no_op() {
        let out = apply_affine(&AffineCalibrator::identity(CalibratorKind::Matrix, 2), &est(&[0.7, 0.3])).unwrap();
        assert!(close(&out.probs, &[0.598687660112452, 0.401312339887548], 1e-12));
        assert!(out.normalized);
    }

    #[test]
    fn scaled_identity_preserves_argmax() {
        for c in [0.01, 0.5, 3.0, 40.0] {
            let cal = AffineCalibrator::temperature(1.0 / c, 3).unwrap();
            let out = apply_affine(&cal, &est(&[0.2, 0.5, 0.3])).unwrap();
            assert_eq!(out.predicted, 1);
        }
    }

    #[test]
    fn uniform_stays_uniform() {
        let out = apply_affine(&AffineCalibrator::identity(CalibratorKind::Vector, 4), &est(&[0.25; 4])).unwrap();
        assert!(close(&out.probs, &[0.25; 4], 1e-15));
    }

    #[test]
    fn dimension_and_normalization_errors() {
        let cal = AffineCalibrator::identity(CalibratorKind::Vector, 3);
        assert!(apply_affine(&cal, &est(&[0.5, 0.5])).is_err());
        assert!(apply_affine(&cal, &ProbabilityEstimate::new(vec![0.2, 0.2, 0.2], false)).is_err());
        assert!(AffineCalibrator::temperature(-1.0, 2).is_err());
        assert!(AffineCalibrator::vector(vec![1.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn serialized_shape() {
        let cal = AffineCalibrator::identity(CalibratorKind::Vector, 3);
        let v = serde_json::to_value(&cal).unwrap();
        assert_eq!(v["kind"], "vector");
        assert_eq!(v["weights"].as_array().unwrap().len(), 3);
        assert_eq!(v["bias"].as_array().unwrap().len(), 3);
        let back: AffineCalibrator = serde_json::from_value(v).unwrap();
        assert_eq!(back, cal);
    }

    fn random_probs(rng: &mut impl Rng, k: usize, sharpness: f64) -> Vec<f64> {
        let z: Vec<f64> = (0..k).map(|_| sharpness * rng.random_range(-1.0..1.0)).collect();
        softmax(&z)
    }

    fn sample_label(rng: &mut impl Rng, q: &[f64]) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in q.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        q.len() - 1
    }

    #[test]
    fn well_specified_identity_is_near_stationary() {
        let mut rng = seed::rng(11);
        let mut ests = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..60_000 {
            let p = random_probs(&mut rng, 2, 3.0);
            labels.push(sample_label(&mut rng, &softmax(&p)));
            ests.push(est(&p));
        }
        let identity = AffineCalibrator::identity(CalibratorKind::Vector, 2);
        let before = cross_entropy(&identity, &ests, &labels, 0.0).unwrap();
        let fit = fit_affine(&ests, &labels, CalibratorKind::Vector, &FitConfig::default()).unwrap();
        let after = cross_entropy(&fit.calibrator, &ests, &labels, 0.0).unwrap();
        assert!(after <= before);
        assert!(before - after < 1e-4, "{before} {after}");
    }

    #[test]
    fn known_vector_distortion_improves_agreement() {
        let mut rng = seed::rng(5);
        let truth = AffineCalibrator::vector(vec![2.0, 0.5], vec![0.0, 0.0]).unwrap();
        let mut ests = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..400 {
            let p = random_probs(&mut rng, 2, 2.0);
            labels.push(sample_label(&mut rng, &apply_affine(&truth, &est(&p)).unwrap().probs));
            ests.push(est(&p));
        }
        let cfg = FitConfig { max_iters: 3000, learning_rate: 1.0, ..Default::default() };
        let fit = fit_affine(&ests, &labels, CalibratorKind::Vector, &cfg).unwrap();
        let agree = |cal: Option<&AffineCalibrator>| {
            ests.iter()
                .zip(&labels)
                .filter(|(e, y)| match cal {
                    Some(c) => apply_affine(c, e).unwrap().predicted == **y,
                    None => e.predicted == **y,
                })
                .count()
        };
        assert!(agree(Some(&fit.calibrator)) >= agree(None));
    }

    #[test]
    fn one_example_per_class_descends_monotonically() {
        let ests = vec![est(&[0.9, 0.05, 0.05]), est(&[0.05, 0.9, 0.05]), est(&[0.05, 0.05, 0.9])];
        let labels = vec![0, 1, 2];
        for kind in [CalibratorKind::Temperature, CalibratorKind::Vector, CalibratorKind::Matrix] {
            let fit = fit_affine(&ests, &labels, kind, &FitConfig::default()).unwrap();
            assert!(fit.report.losses.windows(2).all(|w| w[1] <= w[0]));
            assert!(fit.report.final_loss() < fit.report.initial_loss());
        }
    }

    #[test]
    fn single_class_labels_warn_but_fit() {
        let ests = vec![est(&[0.6, 0.4]), est(&[0.3, 0.7]), est(&[0.5, 0.5])];
        let fit = fit_affine(&ests, &[0, 0, 0], CalibratorKind::Vector, &FitConfig::default()).unwrap();
        assert_eq!(fit.report.warnings.len(), 1);
    }

    #[test]
    fn too_few_samples() {
        let ests = vec![est(&[0.6, 0.4])];
        assert!(matches!(
            fit_affine(&ests, &[0], CalibratorKind::Vector, &FitConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn huge_learning_rate_backs_off() {
        let ests = vec![est(&[0.6, 0.4]), est(&[0.1, 0.9]), est(&[0.8, 0.2])];
        let cfg = FitConfig { learning_rate: 1e300, ..Default::default() };
        let fit = fit_affine(&ests, &[1, 0, 0], CalibratorKind::Matrix, &cfg).unwrap();
        assert!(fit.report.losses.windows(2).all(|w| w[1] <= w[0]));
        assert!(fit.report.final_learning_rate < 1e300);
    }

    #[test]
    fn non_finite_objective_diverges() {
        let bad = [f64::NAN, 0.5];
        let problem = Problem {
            kind: CalibratorKind::Vector,
            k: 2,
            blocks: vec![vec![&bad[..], &bad[..]]],
            labels: &[0, 1],
            l2_weight: 0.0,
            anchor: 1.0,
        };
        let init = AffineCalibrator::identity(CalibratorKind::Vector, 2).parameters();
        assert!(matches!(
            descend(&problem, init, &FitConfig::default()),
            Err(Error::Divergence { iteration: 0, .. })
        ));
    }

    #[test]
    fn comparative_reduces_to_affine() {
        let cal = AffineCalibrator::vector(vec![1.5, 0.7], vec![0.1, -0.2]).unwrap();
        let comp = ComparativeCalibrator::new(BTreeMap::from([(1, cal.clone())]), FitStrategy::Independent).unwrap();
        let e = est(&[0.7, 0.3]);
        let a = apply_affine(&cal, &e).unwrap();
        let b = apply_comparative(&comp, &BTreeMap::from([(1, e)])).unwrap();
        assert_eq!(a, b);
        let id = ComparativeCalibrator::new(
            BTreeMap::from([(1, AffineCalibrator::identity(CalibratorKind::Matrix, 2))]),
            FitStrategy::Joint,
        )
        .unwrap();
        let out = apply_comparative(&id, &BTreeMap::from([(1, est(&[0.7, 0.3]))])).unwrap();
        assert!(close(&out.probs, &[0.598687660112452, 0.401312339887548], 1e-12));
    }

    #[test]
    fn comparative_doubles_identical_terms() {
        let cal = AffineCalibrator::vector(vec![1.5, 0.7], vec![0.1, -0.2]).unwrap();
        let comp = ComparativeCalibrator::new(BTreeMap::from([(1, cal.clone()), (2, cal.clone())]), FitStrategy::Independent).unwrap();
        let p = [0.7, 0.3];
        let out = apply_comparative(&comp, &BTreeMap::from([(1, est(&p)), (2, est(&p))])).unwrap();
        let z0: f64 = 2.0 * (1.5 * 0.7 + 0.1);
        let z1 = 2.0 * (0.7 * 0.3 - 0.2);
        let want0 = 1.0 / (1.0 + (z1 - z0).exp());
        assert!((out.probs[0] - want0).abs() < 1e-12);

        let id = AffineCalibrator::identity(CalibratorKind::Matrix, 3);
        let comp = ComparativeCalibrator::new(BTreeMap::from([(1, id.clone()), (2, id)]), FitStrategy::Joint).unwrap();
        let u = est(&[1.0 / 3.0; 3]);
        let out = apply_comparative(&comp, &BTreeMap::from([(1, u.clone()), (2, u)])).unwrap();
        assert!(close(&out.probs, &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn comparative_key_mismatch() {
        let id = AffineCalibrator::identity(CalibratorKind::Vector, 2);
        let comp = ComparativeCalibrator::new(BTreeMap::from([(1, id.clone()), (2, id.clone())]), FitStrategy::Joint).unwrap();
        assert!(apply_comparative(&comp, &BTreeMap::from([(1, est(&[0.5, 0.5]))])).is_err());
        assert!(ComparativeCalibrator::new(BTreeMap::from([(2, id)]), FitStrategy::Joint).is_err());
    }

    fn comparative_fixture(j: usize, identical: bool) -> BTreeMap<usize, (Vec<ProbabilityEstimate>, Vec<usize>)> {
        let mut rng = seed::rng(3);
        let base: Vec<Vec<f64>> = (0..60).map(|_| random_probs(&mut rng, 3, 3.0)).collect();
        let labels: Vec<usize> = base.iter().map(|p| sample_label(&mut rng, p)).collect();
        (1..=j)
            .map(|jj| {
                let ests = base
                    .iter()
                    .map(|p| {
                        if identical {
                            est(p)
                        } else {
                            let noisy: Vec<f64> = p.iter().map(|x| x * (1.0 + 0.3 * rng.random::<f64>())).collect();
                            let t: f64 = noisy.iter().sum();
                            est(&noisy.iter().map(|x| x / t).collect::<Vec<_>>())
                        }
                    })
                    .collect();
                (jj, (ests, labels.clone()))
            })
            .collect()
    }

    #[test]
    fn matrix_parameter_count_for_ten_sets() {
        let data = comparative_fixture(10, false);
        for strategy in [FitStrategy::Independent, FitStrategy::Joint, FitStrategy::Tied] {
            let fit = fit_comparative(&data, CalibratorKind::Matrix, &FitConfig { max_iters: 50, ..Default::default() }, strategy).unwrap();
            assert_eq!(fit.calibrator.j(), 10);
            assert_eq!(fit.calibrator.n_parameters(), 10 * (9 + 3));
        }
    }

    #[test]
    fn identical_runs_give_identical_calibrators() {
        let data = comparative_fixture(4, true);
        for strategy in [FitStrategy::Independent, FitStrategy::Joint, FitStrategy::Tied] {
            let fit = fit_comparative(&data, CalibratorKind::Vector, &FitConfig::default(), strategy).unwrap();
            let first = &fit.calibrator.per_reference[&1];
            for cal in fit.calibrator.per_reference.values() {
                assert!(close(&cal.weights, &first.weights, 1e-12));
                assert!(close(&cal.bias, &first.bias, 1e-12));
            }
        }
    }

    #[test]
    fn tied_fit_reproduces_the_single_fit_on_the_mean() {
        let data = comparative_fixture(3, false);
        let cfg = FitConfig::default();
        let tied = fit_comparative(&data, CalibratorKind::Vector, &cfg, FitStrategy::Tied).unwrap();
        let mean = mean_estimates(&data);
        let single = fit_affine(&mean, &data[&1].1, CalibratorKind::Vector, &cfg).unwrap();
        for i in [0, 17, 59] {
            let per: BTreeMap<usize, ProbabilityEstimate> = data.iter().map(|(j, (e, _))| (*j, e[i].clone())).collect();
            let a = apply_comparative(&tied.calibrator, &per).unwrap();
            let b = apply_affine(&single.calibrator, &mean[i]).unwrap();
            assert!(close(&a.probs, &b.probs, 1e-12));
        }
    }

    #[test]
    fn comparative_errors_name_the_reference_set() {
        let mut data = comparative_fixture(3, false);
        data.get_mut(&2).unwrap().1.truncate(5);
        for strategy in [FitStrategy::Independent, FitStrategy::Joint, FitStrategy::Tied] {
            match fit_comparative(&data, CalibratorKind::Vector, &FitConfig::default(), strategy) {
                Err(Error::ReferenceSet { reference_set: 2, .. }) => {}
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    fn finite_difference_ok(kind: CalibratorKind, k: usize, n: usize, seed_value: u64, l2: f64) -> bool {
        let mut rng = seed::rng(seed_value);
        let ests: Vec<ProbabilityEstimate> = (0..n).map(|_| est(&random_probs(&mut rng, k, 2.0))).collect();
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let params: Vec<f64> = (0..kind.n_parameters(k)).map(|_| rng.random_range(-1.0..1.5)).collect();
        let cal = AffineCalibrator::from_parameters(kind, k, &params).unwrap();
        let g = gradient(&cal, &ests, &labels, l2).unwrap();
        let h = 1e-5;
        (0..params.len()).all(|i| {
            let mut up = params.clone();
            let mut down = params.clone();
            up[i] += h;
            down[i] -= h;
            let f = |p: &[f64]| cross_entropy(&AffineCalibrator::from_parameters(kind, k, p).unwrap(), &ests, &labels, l2).unwrap();
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            (fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-3)
        })
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(k in 2usize..=4, extra in 0usize..=4, s in any::<u64>(), l2 in prop_oneof![Just(0.0), 0.0f64..0.5]) {
            let n = (k + extra).min(8);
            for kind in [CalibratorKind::Temperature, CalibratorKind::Vector, CalibratorKind::Matrix] {
                prop_assert!(finite_difference_ok(kind, k, n, s, l2));
            }
        }

        #[test]
        fn softmax_output_is_normalized(z in proptest::collection::vec(-50.0f64..50.0, 2..6)) {
            let p = softmax(&z);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|x| *x > 0.0));
        }

        #[test]
        fn calibrated_output_is_normalized(w in proptest::collection::vec(-5.0f64..5.0, 9), b in proptest::collection::vec(-5.0f64..5.0, 3), raw in proptest::collection::vec(0.01f64..1.0, 3)) {
            let t: f64 = raw.iter().sum();
            let cal = AffineCalibrator::matrix(3, w, b).unwrap();
            let out = apply_affine(&cal, &est(&raw.iter().map(|x| x / t).collect::<Vec<_>>())).unwrap();
            prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(out.probs.iter().all(|x| *x > 0.0));
        }
    }
}
