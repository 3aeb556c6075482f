//! Domain types shared by every other module: label spaces, samples, dataset
//! splits, probability estimates and the experiment configuration.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// How backend tokens are compared with label variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMatching {
    /// Strip at most one leading whitespace character, then case-fold.
    #[default]
    TrimCaseFold,
    Exact,
}

impl TokenMatching {
    pub fn normalize(self, token: &str) -> String {
        match self {
            TokenMatching::Exact => token.to_string(),
            TokenMatching::TrimCaseFold => {
                let mut chars = token.chars();
                let trimmed = match chars.clone().next() {
                    Some(c) if c.is_whitespace() => {
                        chars.next();
                        chars.as_str()
                    }
                    _ => token,
                };
                trimmed.to_lowercase()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub name: String,
    /// Surface tokens that count as this label. Empty in a document means
    /// "just the name".
    #[serde(default)]
    pub variants: Vec<String>,
}

/// Ordered set of K labels with their token variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LabelSpaceDoc", into = "LabelSpaceDoc")]
pub struct LabelSpace {
    labels: Vec<Label>,
    matching: TokenMatching,
}

#[derive(Serialize, Deserialize)]
struct LabelSpaceDoc {
    labels: Vec<Label>,
    #[serde(default)]
    matching: TokenMatching,
}

impl TryFrom<LabelSpaceDoc> for LabelSpace {
    type Error = Error;

    fn try_from(doc: LabelSpaceDoc) -> Result<Self> {
        LabelSpace::with_matching(doc.labels, doc.matching)
    }
}

impl From<LabelSpace> for LabelSpaceDoc {
    fn from(space: LabelSpace) -> Self {
        LabelSpaceDoc {
            labels: space.labels,
            matching: space.matching,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum LabelSpaceViolation {
    TooFewLabels { count: usize },
    DuplicateName { name: String },
    EmptyVariants { label: String },
    SharedVariant { token: String, first: String, second: String },
}

impl LabelSpace {
    pub fn new(labels: Vec<Label>) -> Result<Self> {
        Self::with_matching(labels, TokenMatching::default())
    }

    pub fn with_matching(labels: Vec<Label>, matching: TokenMatching) -> Result<Self> {
        let labels = labels
            .into_iter()
            .map(|mut l| {
                if l.variants.is_empty() {
                    l.variants.push(l.name.clone());
                }
                l
            })
            .collect();
        let space = LabelSpace { labels, matching };
        let violations = validate_label_space(&space);
        if violations.is_empty() {
            Ok(space)
        } else {
            Err(Error::LabelSpace(violations))
        }
    }

    /// Labels whose only variant is their own name.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|n| Label {
                    name: n.as_ref().to_string(),
                    variants: vec![n.as_ref().to_string()],
                })
                .collect(),
        )
    }

    /// Build without validation; used to exercise [`validate_label_space`].
    pub fn unchecked(labels: Vec<Label>, matching: TokenMatching) -> Self {
        LabelSpace { labels, matching }
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index].name
    }

    pub fn matching(&self) -> TokenMatching {
        self.matching
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.name == name)
    }

    /// Label index a backend token belongs to, if any.
    pub fn label_for_token(&self, token: &str) -> Option<usize> {
        let needle = self.matching.normalize(token);
        self.labels.iter().position(|l| {
            l.variants
                .iter()
                .any(|v| self.matching.normalize(v) == needle)
        })
    }
}

/// Report every violated label-space invariant. Violations are data.
pub fn validate_label_space(space: &LabelSpace) -> Vec<LabelSpaceViolation> {
    let mut out = Vec::new();
    if space.labels.len() < 2 {
        out.push(LabelSpaceViolation::TooFewLabels {
            count: space.labels.len(),
        });
    }
    let mut names = HashSet::new();
    for l in &space.labels {
        if !names.insert(l.name.as_str()) {
            out.push(LabelSpaceViolation::DuplicateName {
                name: l.name.clone(),
            });
        }
        if l.variants.is_empty() {
            out.push(LabelSpaceViolation::EmptyVariants {
                label: l.name.clone(),
            });
        }
    }
    let mut owner: BTreeMap<String, &str> = BTreeMap::new();
    for l in &space.labels {
        let mut own = HashSet::new();
        for v in &l.variants {
            let key = space.matching.normalize(v);
            if !own.insert(key.clone()) {
                continue;
            }
            match owner.get(&key) {
                Some(first) if *first != l.name => {
                    out.push(LabelSpaceViolation::SharedVariant {
                        token: v.clone(),
                        first: first.to_string(),
                        second: l.name.clone(),
                    });
                }
                Some(_) => {}
                None => {
                    owner.insert(key, &l.name);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub test: Vec<Sample>,
    pub validation: Vec<Sample>,
    /// Unlabeled comparison references; labels are never read.
    pub reference_pool: Vec<Sample>,
    pub demo_pool: Vec<Sample>,
}

/// A K-vector of label probabilities with its argmax and confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EstimateDoc")]
pub struct ProbabilityEstimate {
    pub probs: Vec<f64>,
    pub normalized: bool,
    pub predicted: usize,
    pub confidence: f64,
}

#[derive(Deserialize)]
struct EstimateDoc {
    probs: Vec<f64>,
    normalized: bool,
}

impl TryFrom<EstimateDoc> for ProbabilityEstimate {
    type Error = String;

    fn try_from(doc: EstimateDoc) -> std::result::Result<Self, String> {
        if doc.probs.is_empty() || doc.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(format!("invalid probability vector {:?}", doc.probs));
        }
        Ok(ProbabilityEstimate::new(doc.probs, doc.normalized))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl ProbabilityEstimate {
    /// Panics on an empty vector.
    pub fn new(probs: Vec<f64>, normalized: bool) -> Self {
        assert!(!probs.is_empty(), "probability vector must be non-empty");
        let predicted = argmax(&probs);
        let confidence = probs[predicted];
        ProbabilityEstimate {
            probs,
            normalized,
            predicted,
            confidence,
        }
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn mass(&self) -> f64 {
        self.probs.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Independent,
    Comparative,
}

impl InferenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::Independent => "independent",
            InferenceMode::Comparative => "comparative",
        }
    }
}

/// Condition metadata attached to every record.
///
/// `reference_set_id` is set for single comparative runs; aggregated records
/// carry `aggregated_over = J` instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionTag {
    pub mode: InferenceMode,
    pub shots: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_set_id: Option<usize>,
    pub target_position: usize,
    pub replicate_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregated_over: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrated: Option<String>,
}

impl ConditionTag {
    pub fn independent(shots: usize, replicate_seed: u64) -> Self {
        ConditionTag {
            mode: InferenceMode::Independent,
            shots,
            reference_set_id: None,
            target_position: 1,
            replicate_seed,
            aggregated_over: None,
            calibrated: None,
        }
    }

    pub fn comparative(shots: usize, reference_set_id: usize, replicate_seed: u64) -> Self {
        ConditionTag {
            mode: InferenceMode::Comparative,
            shots,
            reference_set_id: Some(reference_set_id),
            target_position: 1,
            replicate_seed,
            aggregated_over: None,
            calibrated: None,
        }
    }

    /// Short human-readable key, e.g. `comparative-0shot-agg10`.
    pub fn label(&self) -> String {
        let mut s = format!("{}-{}shot", self.mode.as_str(), self.shots);
        if self.target_position != 1 {
            s.push_str(&format!("-pos{}", self.target_position));
        }
        if let Some(j) = self.aggregated_over {
            s.push_str(&format!("-agg{j}"));
        }
        if let Some(kind) = &self.calibrated {
            s.push_str(&format!("-{kind}"));
        }
        s
    }
}

/// Per-record extraction diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDiagnostics {
    /// Total raw probability mass on label tokens.
    pub label_mass: f64,
    /// Labels with no variant in the returned distribution (top-k truncation risk).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absent_labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub estimate: ProbabilityEstimate,
    pub true_label: usize,
    pub condition: ConditionTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<RecordDiagnostics>,
}

impl PredictionRecord {
    pub fn new(
        sample_id: impl Into<String>,
        estimate: ProbabilityEstimate,
        true_label: usize,
        condition: ConditionTag,
    ) -> Self {
        PredictionRecord {
            sample_id: sample_id.into(),
            estimate,
            true_label,
            condition,
            diagnostics: None,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.estimate.predicted == self.true_label
    }

    pub fn confidence(&self) -> f64 {
        self.estimate.confidence
    }
}

fn default_bins() -> usize {
    10
}
fn default_refs() -> usize {
    2
}
fn default_sets() -> usize {
    10
}
fn default_replicates() -> usize {
    10
}
fn default_test_cap() -> usize {
    500
}
fn default_val_cap() -> usize {
    200
}
fn default_smoothing() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default = "default_refs")]
    pub n_references: usize,
    /// J: number of reference sets aggregated per sample.
    #[serde(default = "default_sets", alias = "J")]
    pub n_reference_sets: usize,
    #[serde(default = "default_replicates")]
    pub n_replicates: usize,
    #[serde(default = "default_test_cap")]
    pub test_cap: usize,
    #[serde(default = "default_val_cap")]
    pub val_cap: usize,
    #[serde(default = "default_bins")]
    pub dkl_bins: usize,
    #[serde(default = "default_smoothing")]
    pub dkl_smoothing: f64,
    #[serde(default)]
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_bins: default_bins(),
            n_references: default_refs(),
            n_reference_sets: default_sets(),
            n_replicates: default_replicates(),
            test_cap: default_test_cap(),
            val_cap: default_val_cap(),
            dkl_bins: default_bins(),
            dkl_smoothing: default_smoothing(),
            master_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_bins", self.n_bins),
            ("n_references", self.n_references),
            ("n_reference_sets", self.n_reference_sets),
            ("n_replicates", self.n_replicates),
            ("test_cap", self.test_cap),
            ("val_cap", self.val_cap),
            ("dkl_bins", self.dkl_bins),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(self.dkl_smoothing > 0.0) {
            return Err(Error::InvalidArgument("dkl_smoothing must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct DatasetLine {
    #[serde(default)]
    id: Option<String>,
    text: String,
    label: String,
}

/// Parse JSONL `{text, label}` lines. Ids default to `line-N` (1-based).
pub fn parse_dataset(contents: &str, space: &LabelSpace) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in contents.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DatasetLine = serde_json::from_str(line).map_err(|e| Error::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        let label = space.index_of(&parsed.label).ok_or_else(|| Error::Schema {
            line: line_no,
            message: format!("unknown label {:?}", parsed.label),
        })?;
        let id = parsed.id.unwrap_or_else(|| format!("line-{line_no}"));
        if !seen.insert(id.clone()) {
            return Err(Error::Schema {
                line: line_no,
                message: format!("duplicate id {id:?}"),
            });
        }
        out.push(Sample {
            id,
            text: parsed.text,
            label: Some(label),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("dataset has no records"));
    }
    Ok(out)
}

/// Shuffle once under `seed` and slice test, validation, reference pool and
/// demo pool in that order.
///
/// With fewer records than `test_cap + val_cap + n_references`, the reference
/// pool is reserved first and test/validation shrink proportionally. Below
/// `n_references + 2` records the dataset is rejected.
pub fn split_dataset(
    mut samples: Vec<Sample>,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<DatasetSplits> {
    config.validate()?;
    let n = samples.len();
    let minimum = config.n_references + 2;
    if n < minimum {
        return Err(Error::InsufficientData(format!(
            "{n} records; at least {minimum} needed (1 test, 1 validation, {} references)",
            config.n_references
        )));
    }
    samples.shuffle(&mut seed::rng(seed::derive(seed, "split")));

    let (test_n, val_n) = if n >= config.test_cap + config.val_cap + config.n_references {
        (config.test_cap, config.val_cap)
    } else {
        let available = n - config.n_references;
        let share = available * config.val_cap / (config.test_cap + config.val_cap);
        let val = share.clamp(1, config.val_cap).min(available - 1);
        let test = (available - val).min(config.test_cap);
        (test, val)
    };
    let pooled = n - test_n - val_n;
    let ref_n = pooled.div_ceil(2).max(config.n_references).min(pooled);

    let mut rest = samples.into_iter();
    let test: Vec<Sample> = rest.by_ref().take(test_n).collect();
    let validation: Vec<Sample> = rest.by_ref().take(val_n).collect();
    let reference_pool: Vec<Sample> = rest.by_ref().take(ref_n).collect();
    let demo_pool: Vec<Sample> = rest.collect();
    Ok(DatasetSplits {
        test,
        validation,
        reference_pool,
        demo_pool,
    })
}

pub fn load_dataset(
    path: &Path,
    space: &LabelSpace,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<DatasetSplits> {
    let contents = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    split_dataset(parse_dataset(&contents, space)?, config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn yes_no() -> LabelSpace {
        LabelSpace::from_names(&["Yes", "No"]).unwrap()
    }

    fn jsonl(n: usize) -> String {
        (0..n)
            .map(|i| {
                format!(
                    "{{\"text\": \"sample {i}\", \"label\": \"{}\"}}\n",
                    if i % 2 == 0 { "Yes" } else { "No" }
                )
            })
            .collect()
    }

    fn ids(s: &[Sample]) -> Vec<&str> {
        s.iter().map(|x| x.id.as_str()).collect()
    }

    #[test]
    fn label_space_examples() {
        assert!(validate_label_space(&yes_no()).is_empty());
        let pos = LabelSpace::new(vec![
            Label { name: "Positive".into(), variants: vec!["Pos".into(), "Positive".into()] },
            Label { name: "Negative".into(), variants: vec!["Neg".into()] },
        ]);
        assert!(pos.is_ok());
        let shared = LabelSpace::unchecked(
            vec![
                Label { name: "X".into(), variants: vec!["A".into()] },
                Label { name: "Y".into(), variants: vec!["A".into()] },
            ],
            TokenMatching::Exact,
        );
        assert_eq!(
            validate_label_space(&shared),
            vec![LabelSpaceViolation::SharedVariant {
                token: "A".into(),
                first: "X".into(),
                second: "Y".into()
            }]
        );
    }

    #[test]
    fn label_space_reports_every_violation() {
        let bad = LabelSpace::unchecked(
            vec![Label { name: "Solo".into(), variants: vec![] }],
            TokenMatching::Exact,
        );
        let v = validate_label_space(&bad);
        assert!(v.contains(&LabelSpaceViolation::TooFewLabels { count: 1 }));
        assert!(v.contains(&LabelSpaceViolation::EmptyVariants { label: "Solo".into() }));
    }

    #[test]
    fn case_folding_collisions_are_shared_variants() {
        let r = LabelSpace::new(vec![
            Label { name: "Yes".into(), variants: vec!["yes".into()] },
            Label { name: "YES".into(), variants: vec!["YES".into()] },
        ]);
        assert!(matches!(r, Err(Error::LabelSpace(_))));
    }

    #[test]
    fn token_matching_trims_one_space() {
        let space = yes_no();
        assert_eq!(space.label_for_token(" Yes"), Some(0));
        assert_eq!(space.label_for_token("no"), Some(1));
        assert_eq!(space.label_for_token("  Yes"), None);
        assert_eq!(TokenMatching::Exact.normalize(" Yes"), " Yes");
    }

    #[test]
    fn label_space_json_round_trip() {
        let json = r#"{"labels":[{"name":"Positive","variants":["Pos","Positive"]},{"name":"Negative"}]}"#;
        let space: LabelSpace = serde_json::from_str(json).unwrap();
        assert_eq!(space.labels()[1].variants, vec!["Negative".to_string()]);
        let bad = r#"{"labels":[{"name":"A"}]}"#;
        assert!(serde_json::from_str::<LabelSpace>(bad).is_err());
    }

    #[test]
    fn thousand_records_split_500_200_300() {
        let samples = parse_dataset(&jsonl(1000), &yes_no()).unwrap();
        let s = split_dataset(samples, &ExperimentConfig::default(), 1).unwrap();
        assert_eq!(s.test.len(), 500);
        assert_eq!(s.validation.len(), 200);
        assert_eq!(s.reference_pool.len() + s.demo_pool.len(), 300);
        assert_eq!(s.reference_pool.len(), 150);
    }

    #[test]
    fn split_is_deterministic() {
        let a = split_dataset(parse_dataset(&jsonl(50), &yes_no()).unwrap(), &ExperimentConfig::default(), 9).unwrap();
        let b = split_dataset(parse_dataset(&jsonl(50), &yes_no()).unwrap(), &ExperimentConfig::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(parse_dataset(&jsonl(50), &yes_no()).unwrap(), &ExperimentConfig::default(), 10).unwrap();
        assert_ne!(ids(&a.test), ids(&c.test));
    }

    #[test]
    fn ten_records_still_split() {
        let s = split_dataset(parse_dataset(&jsonl(10), &yes_no()).unwrap(), &ExperimentConfig::default(), 3).unwrap();
        assert_eq!(s.test.len(), 6);
        assert_eq!(s.validation.len(), 2);
        assert_eq!(s.reference_pool.len(), 2);
        assert!(s.demo_pool.is_empty());
    }

    #[test]
    fn too_few_records_rejected() {
        let r = split_dataset(parse_dataset(&jsonl(3), &yes_no()).unwrap(), &ExperimentConfig::default(), 3);
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn unknown_label_names_the_line() {
        let text = "{\"text\":\"a\",\"label\":\"Yes\"}\n{\"text\":\"b\",\"label\":\"Maybe\"}\n";
        match parse_dataset(text, &yes_no()) {
            Err(Error::Schema { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("Maybe"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
        let e = ProbabilityEstimate::new(vec![0.0, 0.0, 0.0], false);
        assert_eq!((e.predicted, e.confidence), (0, 0.0));
    }

    #[test]
    fn config_defaults_and_alias() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"J": 4}"#).unwrap();
        assert_eq!(c.n_reference_sets, 4);
        assert_eq!(c.test_cap, 500);
        assert_eq!(c.val_cap, 200);
        assert_eq!(c.n_references, 2);
        assert_eq!(c.n_replicates, 10);
        let bad = ExperimentConfig { dkl_smoothing: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn splits_are_disjoint(n in 4usize..400, seed in any::<u64>()) {
            let cfg = ExperimentConfig { test_cap: 100, val_cap: 40, ..Default::default() };
            let s = split_dataset(parse_dataset(&jsonl(n), &yes_no()).unwrap(), &cfg, seed).unwrap();
            let mut all: Vec<&str> = Vec::new();
            for part in [&s.test, &s.validation, &s.reference_pool, &s.demo_pool] {
                all.extend(ids(part));
            }
            let unique: HashSet<&str> = all.iter().copied().collect();
            prop_assert_eq!(unique.len(), all.len());
            prop_assert_eq!(all.len(), n);
            prop_assert!(s.test.len() <= 100 && s.validation.len() <= 40);
            prop_assert!(s.reference_pool.len() >= cfg.n_references);
            prop_assert!(!s.test.is_empty() && !s.validation.is_empty());
        }

        #[test]
        fn argmax_matches_first_maximum(v in proptest::collection::vec(0.0f64..1.0, 1..8)) {
            let e = ProbabilityEstimate::new(v.clone(), false);
            let max = v.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(e.predicted, v.iter().position(|x| *x == max).unwrap());
            prop_assert_eq!(e.confidence, max);
        }
    }
}
