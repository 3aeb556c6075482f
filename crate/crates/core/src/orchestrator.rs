//! End-to-end execution of evaluation conditions.
//!
//! A condition is a (mode, shots) pair run over one split for one replicate
//! seed. Comparative runs score every test sample against `J` independently
//! drawn reference sets and keep each set's records, so aggregation and
//! per-reference calibration can be recomputed from the artifact alone.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{
    score_batch, Backend, BackendError, BackendRequest, DecodeStrategy, RequestContext, RetryPolicy,
};
use crate::error::{Error, Result};
use crate::extraction::{extract_label_distribution, Extraction, ExtractionMode};
use crate::metrics::{self, CalibrationReport, MetricValue, Reason};
use crate::model::{
    ConditionTag, DatasetSplits, ExperimentConfig, InferenceMode, LabelSpace, PredictionRecord,
    ProbabilityEstimate, RecordDiagnostics, Sample,
};
use crate::prompting::{build_prompt, reference_set_schedule, sample_references, PromptSpec, TaskTemplate};
use crate::seed;

pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    #[default]
    Test,
    Validation,
}

impl SplitKind {
    fn select(self, splits: &DatasetSplits) -> &[Sample] {
        match self {
            SplitKind::Test => &splits.test,
            SplitKind::Validation => &splits.validation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub mode: InferenceMode,
    pub shots: usize,
    /// J; ignored for independent runs.
    pub reference_sets: usize,
    pub split: SplitKind,
    pub decode: DecodeStrategy,
    pub extraction: ExtractionMode,
    /// Retry with per-label scoring when first-token label mass is zero.
    pub fallback_to_per_label: bool,
    /// One reference schedule per replicate instead of per (replicate, sample).
    pub fixed_references: bool,
    pub target_position: usize,
    pub parallelism: usize,
    pub max_tokens: usize,
    pub top_logprobs: Option<usize>,
    pub independent_forced_prefix: String,
    pub comparative_forced_prefix: String,
    pub keep_prompts: bool,
    pub retry: RetryPolicy,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: InferenceMode::Independent,
            shots: 0,
            reference_sets: 1,
            split: SplitKind::Test,
            decode: DecodeStrategy::FirstToken,
            extraction: ExtractionMode::Raw,
            fallback_to_per_label: true,
            fixed_references: false,
            target_position: 1,
            parallelism: 4,
            max_tokens: 16,
            top_logprobs: None,
            independent_forced_prefix: String::new(),
            comparative_forced_prefix: "1). ".to_string(),
            keep_prompts: true,
            retry: RetryPolicy::default(),
        }
    }
}

impl RunOptions {
    pub fn independent(shots: usize) -> Self {
        RunOptions {
            shots,
            ..Default::default()
        }
    }

    pub fn comparative(shots: usize, reference_sets: usize) -> Self {
        RunOptions {
            mode: InferenceMode::Comparative,
            shots,
            reference_sets,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_set: Option<usize>,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub backend: String,
    pub decode: DecodeStrategy,
    pub extraction: ExtractionMode,
    pub template: String,
    pub split: SplitKind,
    pub fixed_references: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRun {
    pub schema_version: u32,
    pub condition: ConditionTag,
    pub label_space: LabelSpace,
    pub config: ExperimentConfig,
    pub provenance: RunProvenance,
    pub records: Vec<PredictionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_reference_runs: Option<BTreeMap<usize, Vec<PredictionRecord>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<FailureRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompts: Vec<PromptSpec>,
}

impl EvaluationRun {
    pub fn reference_set_count(&self) -> usize {
        self.per_reference_runs.as_ref().map_or(0, BTreeMap::len)
    }

    pub fn report(&self) -> Result<CalibrationReport> {
        metrics::calibration_report(&self.records, &self.config)
    }
}

struct Job {
    sample_index: usize,
    reference_set: Option<usize>,
    request: BackendRequest,
}

fn failure(sample_id: &str, reference_set: Option<usize>, err: &Error) -> FailureRecord {
    let kind = match err {
        Error::Backend(BackendError::Extraction { .. }) => "extraction".to_string(),
        Error::Backend(_) => "backend".to_string(),
        other => other.kind().to_string(),
    };
    FailureRecord {
        sample_id: sample_id.to_string(),
        reference_set,
        kind,
        message: err.to_string(),
    }
}

/// Run one condition for one replicate seed.
#[allow(clippy::too_many_arguments)]
pub fn run_condition(
    splits: &DatasetSplits,
    template: &TaskTemplate,
    space: &LabelSpace,
    backend: &dyn Backend,
    options: &RunOptions,
    config: &ExperimentConfig,
    replicate_seed: u64,
) -> Result<EvaluationRun> {
    config.validate()?;
    let targets = options.split.select(splits);
    if targets.is_empty() {
        return Err(Error::EmptyInput("selected split is empty"));
    }
    let comparative = options.mode == InferenceMode::Comparative;
    let sets = if comparative { options.reference_sets.max(1) } else { 1 };
    if comparative && splits.reference_pool.len() < config.n_references {
        return Err(Error::InsufficientData(format!(
            "reference pool has {} samples, {} needed",
            splits.reference_pool.len(),
            config.n_references
        )));
    }
    let demos = if options.shots > 0 {
        let mut rng = seed::rng(seed::derive(replicate_seed, "demos"));
        sample_references(&splits.demo_pool, options.shots, None, &mut rng)?
    } else {
        Vec::new()
    };

    let space_arc = Arc::new(space.clone());
    let mut jobs = Vec::new();
    let mut prompts = Vec::new();
    for (i, target) in targets.iter().enumerate() {
        let ref_sets = if comparative {
            let schedule_seed = if options.fixed_references {
                seed::derive(replicate_seed, "references")
            } else {
                seed::derive(seed::derive(replicate_seed, "references"), &target.id)
            };
            reference_set_schedule(&splits.reference_pool, config.n_references, sets, Some(&target.id), schedule_seed)?
        } else {
            vec![Vec::new()]
        };
        for (j0, refs) in ref_sets.iter().enumerate() {
            let reference_set = comparative.then_some(j0 + 1);
            let prompt = build_prompt(template, space, target, &demos, refs, options.target_position)?;
            let mut request = BackendRequest::new(
                prompt.text.clone(),
                space_arc.clone(),
                RequestContext {
                    target_id: target.id.clone(),
                    reference_ids: prompt.reference_ids.clone(),
                    reference_set,
                },
            );
            request.decode = options.decode;
            request.max_tokens = options.max_tokens;
            request.answer_position = options.target_position;
            if let Some(top) = options.top_logprobs {
                request.top_logprobs = top;
            }
            request.forced_prefix = if comparative {
                options.comparative_forced_prefix.clone()
            } else {
                options.independent_forced_prefix.clone()
            };
            if options.keep_prompts {
                prompts.push(prompt);
            }
            jobs.push(Job {
                sample_index: i,
                reference_set,
                request,
            });
        }
    }

    let requests: Vec<BackendRequest> = jobs.iter().map(|j| j.request.clone()).collect();
    let scored = score_batch(backend, &requests, options.parallelism, &options.retry);

    let mut extracted: Vec<Result<(Extraction, bool)>> = scored
        .into_iter()
        .map(|r| {
            r.map_err(Error::from)
                .and_then(|d| extract_label_distribution(&d, space, options.extraction))
                .map(|e| (e, false))
        })
        .collect();

    if options.fallback_to_per_label && options.decode == DecodeStrategy::FirstToken {
        let retry_idx: Vec<usize> = extracted
            .iter()
            .enumerate()
            .filter(|(_, r)| match r {
                Ok((e, _)) => e.degenerate,
                Err(Error::ZeroMass) => true,
                Err(_) => false,
            })
            .map(|(i, _)| i)
            .collect();
        if !retry_idx.is_empty() {
            let fallback: Vec<BackendRequest> = retry_idx
                .iter()
                .map(|&i| {
                    let mut r = jobs[i].request.clone();
                    r.decode = DecodeStrategy::PerLabelScoring;
                    r
                })
                .collect();
            let rescored = score_batch(backend, &fallback, options.parallelism, &options.retry);
            for (&i, r) in retry_idx.iter().zip(rescored) {
                extracted[i] = r
                    .map_err(Error::from)
                    .and_then(|d| extract_label_distribution(&d, space, options.extraction))
                    .map(|e| (e, true));
            }
        }
    }

    let mut by_set: BTreeMap<usize, Vec<PredictionRecord>> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut succeeded = BTreeSet::new();
    for (job, result) in jobs.iter().zip(extracted) {
        let target = &targets[job.sample_index];
        let outcome = result.and_then(|ok| {
            let truth = target.label.ok_or_else(|| {
                Error::InvalidArgument(format!("sample {} has no label", target.id))
            })?;
            Ok((ok, truth))
        });
        match outcome {
            Ok(((ex, fallback), truth)) => {
                let mut tag = match job.reference_set {
                    Some(j) => ConditionTag::comparative(options.shots, j, replicate_seed),
                    None => ConditionTag::independent(options.shots, replicate_seed),
                };
                tag.target_position = options.target_position;
                let record = PredictionRecord {
                    sample_id: target.id.clone(),
                    estimate: ex.estimate,
                    true_label: truth,
                    condition: tag,
                    diagnostics: Some(RecordDiagnostics {
                        label_mass: ex.label_mass,
                        absent_labels: ex.absent_labels,
                        fallback,
                    }),
                };
                succeeded.insert(job.sample_index);
                by_set.entry(job.reference_set.unwrap_or(1)).or_default().push(record);
            }
            Err(e) => failures.push(failure(&target.id, job.reference_set, &e)),
        }
    }
    if succeeded.is_empty() {
        let first = failures.first().map_or_else(String::new, |f| f.message.clone());
        return Err(Error::AllFailed(first));
    }
    for f in &failures {
        log::warn!("sample {} failed ({}): {}", f.sample_id, f.kind, f.message);
    }

    let records = by_set.get(&1).cloned().unwrap_or_default();
    let mut condition = match options.mode {
        InferenceMode::Comparative => ConditionTag::comparative(options.shots, 1, replicate_seed),
        InferenceMode::Independent => ConditionTag::independent(options.shots, replicate_seed),
    };
    condition.target_position = options.target_position;
    Ok(EvaluationRun {
        schema_version: RUN_SCHEMA_VERSION,
        condition,
        label_space: space.clone(),
        config: config.clone(),
        provenance: RunProvenance {
            backend: backend.identity(),
            decode: options.decode,
            extraction: options.extraction,
            template: template.name.clone(),
            split: options.split,
            fixed_references: options.fixed_references,
        },
        records,
        per_reference_runs: comparative.then(|| {
            (1..=sets)
                .map(|j| (j, by_set.remove(&j).unwrap_or_default()))
                .collect()
        }),
        failures,
        prompts,
    })
}

/// Element-wise mean of each sample's probability vectors over the J runs.
pub fn aggregate_comparative(per_reference_runs: &BTreeMap<usize, Vec<PredictionRecord>>) -> Result<Vec<PredictionRecord>> {
    let mut runs = per_reference_runs.values();
    let first = runs
        .next()
        .ok_or(Error::EmptyInput("no per-reference runs to aggregate"))?;
    let j_count = per_reference_runs.len();
    let first_ids: BTreeSet<&str> = first.iter().map(|r| r.sample_id.as_str()).collect();
    let mut missing = BTreeSet::new();
    let mut lookup: Vec<BTreeMap<&str, &PredictionRecord>> = Vec::with_capacity(j_count);
    for run in per_reference_runs.values() {
        let map: BTreeMap<&str, &PredictionRecord> = run.iter().map(|r| (r.sample_id.as_str(), r)).collect();
        for id in first_ids.symmetric_difference(&map.keys().copied().collect()) {
            missing.insert(id.to_string());
        }
        lookup.push(map);
    }
    if !missing.is_empty() {
        return Err(Error::Alignment {
            missing: missing.into_iter().collect(),
        });
    }
    first
        .iter()
        .map(|base| {
            let k = base.estimate.k();
            let mut mean = vec![0.0; k];
            let mut normalized = true;
            for map in &lookup {
                let r = map[base.sample_id.as_str()];
                if r.estimate.k() != k || r.true_label != base.true_label {
                    return Err(Error::InvalidArgument(format!(
                        "runs disagree on label arity or gold label for {}",
                        base.sample_id
                    )));
                }
                normalized &= r.estimate.normalized;
                for (m, p) in mean.iter_mut().zip(&r.estimate.probs) {
                    *m += p;
                }
            }
            mean.iter_mut().for_each(|m| *m /= j_count as f64);
            let mut condition = base.condition.clone();
            condition.reference_set_id = None;
            condition.aggregated_over = Some(j_count);
            Ok(PredictionRecord {
                sample_id: base.sample_id.clone(),
                estimate: ProbabilityEstimate::new(mean, normalized),
                true_label: base.true_label,
                condition,
                diagnostics: None,
            })
        })
        .collect()
}

/// The first `j` per-reference runs of `run`.
pub fn first_sets(run: &EvaluationRun, j: usize) -> Result<BTreeMap<usize, Vec<PredictionRecord>>> {
    let per = run
        .per_reference_runs
        .as_ref()
        .ok_or(Error::EmptyInput("run has no per-reference records"))?;
    if j == 0 || j > per.len() {
        return Err(Error::InvalidArgument(format!("J={j} outside 1..={}", per.len())));
    }
    Ok(per.iter().take(j).map(|(k, v)| (*k, v.clone())).collect())
}

/// Aggregated copy of a comparative run over its first `j` reference sets.
pub fn aggregate_run(run: &EvaluationRun, j: usize) -> Result<EvaluationRun> {
    let sets = first_sets(run, j)?;
    let records = aggregate_comparative(&sets)?;
    let mut condition = run.condition.clone();
    condition.reference_set_id = None;
    condition.aggregated_over = Some(j);
    Ok(EvaluationRun {
        condition,
        records,
        per_reference_runs: Some(sets),
        ..run.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub j: usize,
    pub ece: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// ECE and F1 of the aggregate over the first `j` sets, for `j = 1..=J`.
pub fn aggregation_trend(run: &EvaluationRun) -> Result<Vec<TrendRow>> {
    (1..=run.reference_set_count().max(1))
        .map(|j| {
            let records = aggregate_comparative(&first_sets(run, j)?)?;
            let r = metrics::calibration_report(&records, &run.config)?;
            Ok(TrendRow {
                j,
                ece: r.ece,
                accuracy: r.accuracy,
                macro_f1: r.macro_f1,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionAccuracy {
    pub position: usize,
    pub accuracy: Option<f64>,
    pub scored: usize,
    pub failed: usize,
}

/// Comparative accuracy with the target placed, and read back, at each
/// position `1..=1 + n_references`.
pub fn position_decay_diagnostic(
    splits: &DatasetSplits,
    template: &TaskTemplate,
    space: &LabelSpace,
    backend: &dyn Backend,
    options: &RunOptions,
    config: &ExperimentConfig,
    replicate_seed: u64,
) -> Result<Vec<PositionAccuracy>> {
    (1..=config.n_references + 1)
        .map(|position| {
            let opts = RunOptions {
                mode: InferenceMode::Comparative,
                reference_sets: 1,
                target_position: position,
                max_tokens: options.max_tokens.max(16 * position),
                ..options.clone()
            };
            match run_condition(splits, template, space, backend, &opts, config, replicate_seed) {
                Ok(run) => {
                    let scored = run.records.len();
                    let correct = run.records.iter().filter(|r| r.is_correct()).count();
                    Ok(PositionAccuracy {
                        position,
                        accuracy: (scored > 0).then(|| correct as f64 / scored as f64),
                        scored,
                        failed: run.failures.len(),
                    })
                }
                Err(Error::AllFailed(_)) => Ok(PositionAccuracy {
                    position,
                    accuracy: None,
                    scored: 0,
                    failed: options.split.select(splits).len(),
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: MetricValue,
    pub std: MetricValue,
    pub n_defined: usize,
    pub n_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub n_replicates: usize,
    pub single_replicate: bool,
    pub metrics: BTreeMap<String, MetricSummary>,
}

pub const SUMMARY_METRICS: [&str; 8] = ["accuracy", "dkl", "ece", "ice", "ice_neg", "ice_pos", "macro_ce", "macro_f1"];

fn metric_of(report: &CalibrationReport, name: &str) -> MetricValue {
    match name {
        "accuracy" => MetricValue::Defined(report.accuracy),
        "dkl" => report.dkl,
        "ece" => MetricValue::Defined(report.ece),
        "ice" => MetricValue::Defined(report.ice),
        "ice_neg" => report.ice_neg,
        "ice_pos" => report.ice_pos,
        "macro_ce" => report.macro_ce,
        "macro_f1" => MetricValue::Defined(report.macro_f1),
        _ => unreachable!("unknown metric {name}"),
    }
}

/// Mean and sample standard deviation per metric; undefined values are
/// excluded and counted. A single defined value has std 0. A metric that is
/// undefined everywhere keeps its reason when all replicates agree on it.
pub fn summarize_reports(reports: &[CalibrationReport]) -> ReplicateSummary {
    let metrics = SUMMARY_METRICS
        .iter()
        .map(|name| {
            let values: Vec<f64> = reports.iter().filter_map(|r| metric_of(r, name).value()).collect();
            let n = values.len();
            let summary = if n == 0 {
                let reasons: BTreeSet<_> = reports.iter().filter_map(|r| metric_of(r, name).reason()).map(|r| r.code()).collect();
                let reason = match reasons.len() {
                    1 => metric_of(&reports[0], name).reason().unwrap_or(Reason::NoDefinedReplicates),
                    _ => Reason::NoDefinedReplicates,
                };
                MetricSummary {
                    mean: MetricValue::undefined(reason),
                    std: MetricValue::undefined(reason),
                    n_defined: 0,
                    n_undefined: reports.len(),
                }
            } else {
                let mean = values.iter().sum::<f64>() / n as f64;
                let constant = values.iter().all(|v| *v == values[0]);
                let mean = if constant { values[0] } else { mean };
                let std = if n == 1 || constant {
                    0.0
                } else {
                    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                };
                MetricSummary {
                    mean: MetricValue::Defined(mean),
                    std: MetricValue::Defined(std),
                    n_defined: n,
                    n_undefined: reports.len() - n,
                }
            };
            (name.to_string(), summary)
        })
        .collect();
    ReplicateSummary {
        n_replicates: reports.len(),
        single_replicate: reports.len() == 1,
        metrics,
    }
}

pub fn replicate_seed(master_seed: u64, index: usize) -> u64 {
    seed::derive_index(master_seed, "replicate", index as u64)
}

/// Run `factory` once per derived replicate seed and summarise.
pub fn replicate_and_summarize<F>(mut factory: F, n_replicates: usize, master_seed: u64) -> Result<ReplicateSummary>
where
    F: FnMut(u64) -> Result<CalibrationReport>,
{
    if n_replicates == 0 {
        return Err(Error::InvalidArgument("n_replicates must be at least 1".into()));
    }
    let reports = (0..n_replicates)
        .map(|i| factory(replicate_seed(master_seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_reports(&reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{GenerativeRule, MockModel, MockModelSpec};
    use crate::model::split_dataset;
    use proptest::prelude::*;

    fn space() -> LabelSpace {
        LabelSpace::from_names(&["Yes", "No"]).unwrap()
    }

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample { id: format!("s{i:03}"), text: format!("input number {i}"), label: Some(i % 2) })
            .collect()
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig { test_cap: 20, val_cap: 10, ..Default::default() }
    }

    fn splits() -> DatasetSplits {
        split_dataset(samples(60), &small_config(), 3).unwrap()
    }

    fn oracle_mock(splits: &DatasetSplits) -> MockModel {
        let table = splits
            .test
            .iter()
            .chain(&splits.validation)
            .map(|s| {
                let mut p = vec![0.0; 2];
                p[s.label.unwrap()] = 1.0;
                (s.id.clone(), p)
            })
            .collect();
        MockModel::new(MockModelSpec { table, ..Default::default() }).unwrap()
    }

    fn rule_mock(splits: &DatasetSplits, rule: GenerativeRule) -> MockModel {
        let truth = splits
            .test
            .iter()
            .chain(&splits.validation)
            .map(|s| (s.id.clone(), s.label.unwrap()))
            .collect();
        MockModel::new(MockModelSpec { rule: Some(rule), truth, seed: 9, ..Default::default() }).unwrap()
    }

    fn rule() -> GenerativeRule {
        GenerativeRule {
            true_label_weight: 1.5,
            noise_weight: 1.0,
            label_mass: 0.9,
            bias_table: vec![],
            dirichlet_bias: None,
            position_accuracy: vec![],
        }
    }

    #[test]
    fn oracle_model_is_perfect() {
        let s = splits();
        let run = run_condition(&s, &TaskTemplate::trec(), &space(), &oracle_mock(&s), &RunOptions::independent(0), &small_config(), 1).unwrap();
        let r = run.report().unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.ece, 0.0);
        assert_eq!(run.records.len(), 20);
    }

    #[test]
    fn comparative_prompts_enumerate_three_inputs_target_first() {
        let s = splits();
        let run = run_condition(&s, &TaskTemplate::trec(), &space(), &oracle_mock(&s), &RunOptions::comparative(0, 2), &small_config(), 1).unwrap();
        assert_eq!(run.prompts.len(), 40);
        for p in &run.prompts {
            assert_eq!(p.reference_ids.len(), 2);
            assert_eq!(p.target_position, 1);
            assert!(p.text.contains("For the following 3 questions:"));
            let target = s.test.iter().find(|x| x.id == p.target_id).unwrap();
            assert!(p.text.contains(&format!("###Question 1:{}", target.text)));
            assert!(!p.reference_ids.contains(&p.target_id));
        }
        let per = run.per_reference_runs.as_ref().unwrap();
        assert_eq!(per.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn equal_seeds_give_identical_artifacts() {
        let s = splits();
        let m = rule_mock(&s, rule());
        let opts = RunOptions { parallelism: 3, ..RunOptions::comparative(2, 3) };
        let a = run_condition(&s, &TaskTemplate::trec(), &space(), &m, &opts, &small_config(), 5).unwrap();
        let b = run_condition(&s, &TaskTemplate::trec(), &space(), &m, &opts, &small_config(), 5).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.prompts.iter().all(|p| p.demo_ids.len() == 2));
    }

    #[test]
    fn reference_seed_never_changes_evaluated_samples() {
        let s = splits();
        let m = rule_mock(&s, rule());
        let a = run_condition(&s, &TaskTemplate::trec(), &space(), &m, &RunOptions::comparative(0, 2), &small_config(), 1).unwrap();
        let b = run_condition(&s, &TaskTemplate::trec(), &space(), &m, &RunOptions::comparative(0, 2), &small_config(), 2).unwrap();
        let ids = |r: &EvaluationRun| r.records.iter().map(|x| x.sample_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        assert_ne!(a.prompts, b.prompts);
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let s = splits();
        let mut spec = oracle_mock(&s).spec().clone();
        spec.fail.insert(s.test[0].id.clone());
        let m = MockModel::new(spec).unwrap();
        let opts = RunOptions { retry: RetryPolicy::immediate(1), ..RunOptions::independent(0) };
        let run = run_condition(&s, &TaskTemplate::trec(), &space(), &m, &opts, &small_config(), 1).unwrap();
        assert_eq!(run.records.len(), 19);
        assert_eq!(run.failures.len(), 1);
        assert_eq!(run.failures[0].kind, "backend");

        let mut spec = oracle_mock(&s).spec().clone();
        spec.fail.extend(s.test.iter().map(|x| x.id.clone()));
        let m = MockModel::new(spec).unwrap();
        let r = run_condition(&s, &TaskTemplate::trec(), &space(), &m, &opts, &small_config(), 1);
        assert!(matches!(r, Err(Error::AllFailed(_))));
    }

    #[test]
    fn degenerate_mass_falls_back_to_per_label() {
        let s = splits();
        let table = s.test.iter().map(|x| (x.id.clone(), vec![0.0, 0.0])).collect();
        let m = MockModel::new(MockModelSpec { table, ..Default::default() }).unwrap();
        let run = run_condition(&s, &TaskTemplate::trec(), &space(), &m, &RunOptions::independent(0), &small_config(), 1).unwrap();
        assert!(run.records.iter().all(|r| r.diagnostics.as_ref().unwrap().fallback));
    }

    #[test]
    fn aggregation_examples() {
        let rec = |p: Vec<f64>, j| PredictionRecord::new("a", ProbabilityEstimate::new(p, true), 0, ConditionTag::comparative(0, j, 0));
        let one = BTreeMap::from([(1, vec![rec(vec![0.4, 0.6], 1)])]);
        let agg = aggregate_comparative(&one).unwrap();
        assert_eq!(agg[0].estimate.probs, vec![0.4, 0.6]);
        assert_eq!(agg[0].estimate.predicted, 1);
        assert_eq!(agg[0].condition.aggregated_over, Some(1));

        let two = BTreeMap::from([(1, vec![rec(vec![0.8, 0.2], 1)]), (2, vec![rec(vec![0.6, 0.4], 2)])]);
        let agg = aggregate_comparative(&two).unwrap();
        assert!((agg[0].estimate.probs[0] - 0.7).abs() < 1e-12);
        assert!((agg[0].estimate.probs[1] - 0.3).abs() < 1e-12);
        assert_eq!(agg[0].estimate.predicted, 0);
    }

    #[test]
    fn misaligned_runs_name_missing_ids() {
        let rec = |id: &str| PredictionRecord::new(id, ProbabilityEstimate::new(vec![0.5, 0.5], true), 0, ConditionTag::comparative(0, 1, 0));
        let runs = BTreeMap::from([(1, vec![rec("a"), rec("b")]), (2, vec![rec("a"), rec("c")])]);
        match aggregate_comparative(&runs) {
            Err(Error::Alignment { missing }) => assert_eq!(missing, vec!["b".to_string(), "c".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_mean_bias_is_recovered_by_aggregation() {
        let s = splits();
        let mut r = rule();
        r.bias_table = (0..10)
            .map(|j| {
                let e = 0.01 * (j as f64 - 4.5);
                vec![e, -e]
            })
            .collect();
        r.label_mass = 0.8;
        let m = rule_mock(&s, r);
        let run = run_condition(&s, &TaskTemplate::trec(), &space(), &m, &RunOptions::comparative(0, 10), &small_config(), 4).unwrap();
        let agg = aggregate_comparative(run.per_reference_runs.as_ref().unwrap()).unwrap();
        for rec in &agg {
            let base = m.base_distribution(&rec.sample_id, 2, 1).unwrap();
            for (a, b) in rec.estimate.probs.iter().zip(&base) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn position_decay_reproduces_configured_accuracies() {
        let samples: Vec<Sample> = (0..2400)
            .map(|i| Sample { id: format!("s{i}"), text: format!("t{i}"), label: Some(i % 2) })
            .collect();
        let cfg = ExperimentConfig { test_cap: 2000, val_cap: 10, ..Default::default() };
        let s = split_dataset(samples, &cfg, 1).unwrap();
        let mut r = rule();
        r.true_label_weight = 8.0;
        r.noise_weight = 0.1;
        r.position_accuracy = vec![0.9, 0.7, 0.5];
        let m = rule_mock(&s, r);
        let opts = RunOptions { keep_prompts: false, ..RunOptions::comparative(0, 1) };
        let table = position_decay_diagnostic(&s, &TaskTemplate::trec(), &space(), &m, &opts, &cfg, 1).unwrap();
        assert_eq!(table.len(), 3);
        for (row, want) in table.iter().zip([0.9, 0.7, 0.5]) {
            assert!((row.accuracy.unwrap() - want).abs() < 0.04, "{row:?}");
        }
        let plain = run_condition(&s, &TaskTemplate::trec(), &space(), &m, &opts, &cfg, 1).unwrap();
        let acc = plain.records.iter().filter(|x| x.is_correct()).count() as f64 / plain.records.len() as f64;
        assert_eq!(table[0].accuracy, Some(acc));
    }

    fn report_with(ece: f64, acc: f64) -> CalibrationReport {
        CalibrationReport {
            ece,
            ice: ece,
            ice_pos: MetricValue::Defined(0.1),
            ice_neg: MetricValue::undefined(Reason::OneSided),
            macro_ce: MetricValue::undefined(Reason::OneSided),
            dkl: MetricValue::Defined(ece * 2.0),
            accuracy: acc,
            macro_f1: acc,
            n: 10,
            n_correct: 10,
            n_incorrect: 0,
            estimate_mode: metrics::EstimateMode::Raw,
            f1_convention: metrics::F1_CONVENTION.into(),
        }
    }

    #[test]
    fn single_replicate_has_zero_std() {
        let s = replicate_and_summarize(|_| Ok(report_with(0.2, 0.7)), 1, 0).unwrap();
        assert!(s.single_replicate);
        assert_eq!(s.metrics["ece"].std, MetricValue::Defined(0.0));
        assert_eq!(s.metrics["macro_ce"].n_undefined, 1);
        assert_eq!(s.metrics["macro_ce"].mean.reason(), Some(Reason::OneSided));
    }

    #[test]
    fn duplicated_runs_have_zero_std() {
        let s = replicate_and_summarize(|_| Ok(report_with(0.2, 0.7)), 10, 0).unwrap();
        for name in ["ece", "accuracy", "dkl", "ice_pos"] {
            assert_eq!(s.metrics[name].std, MetricValue::Defined(0.0));
        }
    }

    #[test]
    fn noisy_replicates_match_brute_force_stats() {
        let s = splits();
        let m = rule_mock(&s, GenerativeRule { dirichlet_bias: Some(crate::backend::mock::DirichletBias { strength: 0.5, concentration: 2.0 }), ..rule() });
        let opts = RunOptions::comparative(0, 1);
        let mut eces = Vec::new();
        let summary = replicate_and_summarize(
            |seed| {
                let r = run_condition(&s, &TaskTemplate::trec(), &space(), &m, &opts, &small_config(), seed)?.report()?;
                eces.push(r.ece);
                Ok(r)
            },
            10,
            42,
        )
        .unwrap();
        let mean = eces.iter().sum::<f64>() / 10.0;
        let var = eces.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / 9.0;
        assert!((summary.metrics["ece"].mean.value().unwrap() - mean).abs() < 1e-15);
        assert!((summary.metrics["ece"].std.value().unwrap() - var.sqrt()).abs() < 1e-15);
        assert!(var > 0.0);
    }

    proptest! {
        #[test]
        fn aggregation_is_convex_and_dominated(
            runs in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 3), 1..6)
        ) {
            let per: BTreeMap<usize, Vec<PredictionRecord>> = runs
                .iter()
                .enumerate()
                .map(|(j, w)| {
                    let t: f64 = w.iter().sum();
                    let p = w.iter().map(|x| x / t).collect();
                    (j + 1, vec![PredictionRecord::new("a", ProbabilityEstimate::new(p, true), 0, ConditionTag::comparative(0, j + 1, 0))])
                })
                .collect();
            let agg = aggregate_comparative(&per).unwrap();
            for c in 0..3 {
                let vals: Vec<f64> = per.values().map(|r| r[0].estimate.probs[c]).collect();
                let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
                let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
                prop_assert!(agg[0].estimate.probs[c] >= lo - 1e-12 && agg[0].estimate.probs[c] <= hi + 1e-12);
            }
            let winners: BTreeSet<usize> = per.values().map(|r| r[0].estimate.predicted).collect();
            if winners.len() == 1 {
                let dominated = per.values().all(|r| {
                    let p = &r[0].estimate.probs;
                    (0..3).all(|c| c == r[0].estimate.predicted || p[c] < p[r[0].estimate.predicted])
                });
                if dominated {
                    prop_assert_eq!(agg[0].estimate.predicted, *winners.iter().next().unwrap());
                }
            }
        }
    }
}
