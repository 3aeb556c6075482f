//! Cross-condition report bundles built from run artifacts.
//!
//! Every number is recomputed from the artifacts' records with the metrics
//! module. Serialized floats are rounded to six significant digits and all
//! maps are ordered, so equal artifact sets give byte-identical output.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::DecodeStrategy;
use crate::error::{Error, Result};
use crate::extraction::ExtractionMode;
use crate::metrics::{self, CalibrationReport, MetricValue, ReliabilityDiagram};
use crate::model::ExperimentConfig;
use crate::orchestrator::{summarize_reports, EvaluationRun, ReplicateSummary, SUMMARY_METRICS};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactProvenance {
    pub source: String,
    pub condition: String,
    pub backend: String,
    pub decode: DecodeStrategy,
    pub extraction: ExtractionMode,
    pub template: String,
    pub replicate_seed: u64,
    pub n_records: usize,
    pub n_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleProvenance {
    pub artifacts: Vec<ArtifactProvenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub sources: Vec<String>,
    pub config: ExperimentConfig,
    pub reports: Vec<CalibrationReport>,
    pub summary: ReplicateSummary,
    /// Pooled over every artifact of the condition.
    pub reliability: ReliabilityDiagram,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    pub conditions: BTreeMap<String, ConditionSummary>,
    pub provenance: BundleProvenance,
}

/// Group artifacts by condition label and summarise each group.
pub fn build_report(artifacts: &[(String, EvaluationRun)], timestamp: Option<String>) -> Result<ReportBundle> {
    if artifacts.is_empty() {
        return Err(Error::EmptyInput("no artifacts to report on"));
    }
    let mut sorted: Vec<&(String, EvaluationRun)> = artifacts.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));

    let mut groups: BTreeMap<String, Vec<&(String, EvaluationRun)>> = BTreeMap::new();
    for a in &sorted {
        groups.entry(a.1.condition.label()).or_default().push(a);
    }

    let mut conditions = BTreeMap::new();
    for (label, members) in groups {
        let config = members[0].1.config.clone();
        let reports = members
            .iter()
            .map(|(_, run)| run.report())
            .collect::<Result<Vec<_>>>()?;
        let pooled: Vec<_> = members.iter().flat_map(|(_, run)| run.records.iter().cloned()).collect();
        let reliability = metrics::bin_predictions(&pooled, config.n_bins)?;
        conditions.insert(
            label,
            ConditionSummary {
                sources: members.iter().map(|(s, _)| s.clone()).collect(),
                config,
                summary: summarize_reports(&reports),
                reports,
                reliability,
                failures: members.iter().map(|(_, run)| run.failures.len()).sum(),
            },
        );
    }

    let provenance = BundleProvenance {
        artifacts: sorted
            .iter()
            .map(|(source, run)| ArtifactProvenance {
                source: source.clone(),
                condition: run.condition.label(),
                backend: run.provenance.backend.clone(),
                decode: run.provenance.decode,
                extraction: run.provenance.extraction,
                template: run.provenance.template.clone(),
                replicate_seed: run.condition.replicate_seed,
                n_records: run.records.len(),
                n_failures: run.failures.len(),
            })
            .collect(),
        timestamp,
    };
    Ok(ReportBundle {
        schema_version: REPORT_SCHEMA_VERSION,
        conditions,
        provenance,
    })
}

/// `x` rounded to six significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(round_sig(x)) {
                    *n = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Pretty JSON with six-significant-digit floats and a trailing newline.
pub fn to_stable_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| round_sig(v).to_string()).unwrap_or_default()
}

pub fn reliability_csv(diagram: &ReliabilityDiagram) -> String {
    let mut out = String::from("bin_lower,bin_upper,mean_confidence,accuracy,count\n");
    for b in &diagram.bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            round_sig(b.lower),
            round_sig(b.upper),
            fmt_opt(b.mean_confidence),
            fmt_opt(b.accuracy),
            b.count
        );
    }
    out
}

fn cell(v: &MetricValue) -> String {
    match v {
        MetricValue::Defined(x) => round_sig(*x).to_string(),
        MetricValue::Undefined(u) => u.reason.code().to_string(),
    }
}

/// One row per condition with mean and std columns per metric.
pub fn summary_csv(bundle: &ReportBundle) -> String {
    let mut out = String::from("condition,n_replicates");
    for m in SUMMARY_METRICS {
        let _ = write!(out, ",{m}_mean,{m}_std");
    }
    out.push('\n');
    for (label, c) in &bundle.conditions {
        let _ = write!(out, "{label},{}", c.summary.n_replicates);
        for m in SUMMARY_METRICS {
            let s = &c.summary.metrics[m];
            let _ = write!(out, ",{},{}", cell(&s.mean), cell(&s.std));
        }
        out.push('\n');
    }
    out
}

/// File-name-safe form of a condition label.
pub fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConditionTag, LabelSpace, PredictionRecord, ProbabilityEstimate};
    use crate::orchestrator::{RunProvenance, SplitKind, RUN_SCHEMA_VERSION};

    fn run(seed: u64, records: Vec<PredictionRecord>) -> EvaluationRun {
        EvaluationRun {
            schema_version: RUN_SCHEMA_VERSION,
            condition: ConditionTag::independent(0, seed),
            label_space: LabelSpace::from_names(&["a", "b"]).unwrap(),
            config: ExperimentConfig::default(),
            provenance: RunProvenance {
                backend: "test".into(),
                decode: DecodeStrategy::FirstToken,
                extraction: ExtractionMode::Raw,
                template: "trec".into(),
                split: SplitKind::Test,
                fixed_references: false,
            },
            records,
            per_reference_runs: None,
            failures: vec![],
            prompts: vec![],
        }
    }

    fn rec(id: &str, p: f64, truth: usize) -> PredictionRecord {
        PredictionRecord::new(id, ProbabilityEstimate::new(vec![p, 1.0 - p], true), truth, ConditionTag::independent(0, 0))
    }

    #[test]
    fn single_artifact_gives_one_row() {
        let r = run(1, vec![rec("x", 0.8, 0), rec("y", 0.3, 1)]);
        let b = build_report(&[("a.json".into(), r.clone())], None).unwrap();
        assert_eq!(b.conditions.len(), 1);
        let c = &b.conditions["independent-0shot"];
        assert_eq!(c.reports[0], r.report().unwrap());
        assert!(c.summary.single_replicate);
        assert_eq!(summary_csv(&b).lines().count(), 2);
    }

    #[test]
    fn one_sided_cells_show_reason_code() {
        let r = run(1, vec![rec("x", 0.8, 0), rec("y", 0.3, 1)]);
        let b = build_report(&[("a.json".into(), r)], None).unwrap();
        let csv = summary_csv(&b);
        assert!(csv.contains("ONE_SIDED"));
        let json = to_stable_json(&b).unwrap();
        assert!(json.contains("\"reason\": \"ONE_SIDED\""));
    }

    #[test]
    fn bundles_are_order_independent_and_stable() {
        let a = run(1, vec![rec("x", 0.8, 0), rec("y", 0.3, 0)]);
        let b = run(2, vec![rec("x", 0.65, 1), rec("y", 0.9, 0)]);
        let one = build_report(&[("a".into(), a.clone()), ("b".into(), b.clone())], None).unwrap();
        let two = build_report(&[("b".into(), b), ("a".into(), a)], None).unwrap();
        assert_eq!(to_stable_json(&one).unwrap(), to_stable_json(&two).unwrap());
    }

    #[test]
    fn rounding() {
        assert_eq!(round_sig(0.123456789), 0.123457);
        assert_eq!(round_sig(1234567.0), 1234570.0);
        assert_eq!(round_sig(0.0), 0.0);
        let v = serde_json::json!({"x": 0.333333333333, "n": 7});
        assert_eq!(to_stable_json(&v).unwrap(), "{\n  \"n\": 7,\n  \"x\": 0.333333\n}\n");
    }

    #[test]
    fn reliability_csv_columns() {
        let d = metrics::bin_predictions(&[rec("x", 0.85, 0)], 2).unwrap();
        let csv = reliability_csv(&d);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("bin_lower,bin_upper,mean_confidence,accuracy,count"));
        assert_eq!(lines.next(), Some("0,0.5,,,0"));
        assert_eq!(lines.next(), Some("0.5,1,0.85,1,1"));
    }
}
