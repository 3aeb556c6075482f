//! Command-line driver: evaluate, aggregate, calibrate, simulate, report.
//!
//! Every command reads and writes JSON artifacts so that expensive model
//! calls happen once and all analysis can be rerun offline.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use indiscal::backend::{Backend, CompletionsBackend, DecodeStrategy, MockModel, MockModelSpec};
use indiscal::extraction::{renormalize, ExtractionMode};
use indiscal::metrics::{self, CalibrationReport};
use indiscal::model::{load_dataset, ExperimentConfig, InferenceMode, LabelSpace, PredictionRecord, ProbabilityEstimate};
use indiscal::orchestrator::{
    aggregate_run, aggregation_trend, position_decay_diagnostic, replicate_seed, run_condition, EvaluationRun,
    RunOptions, SplitKind, TrendRow,
};
use indiscal::posthoc::{
    calibrate_comparative_records, calibrate_records, fit_affine, fit_comparative, AffineCalibrator, CalibratorKind,
    ComparativeCalibrator, FitConfig, FitReport, FitStrategy,
};
use indiscal::prompting::TaskTemplate;
use indiscal::report::{self, build_report, file_stem, reliability_csv, summary_csv, to_stable_json};
use indiscal::simulator::{generate_scenario, scenario_run, ScenarioSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] indiscal::Error),
    #[error("{message}")]
    Precondition { path: Option<PathBuf>, message: String },
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Precondition { .. } => "precondition",
            CliError::Write { .. } => "io",
            CliError::Usage(_) => "usage",
        }
    }

    fn path(&self) -> Option<&Path> {
        match self {
            CliError::Core(indiscal::Error::Io { path, .. }) => Some(path),
            CliError::Precondition { path, .. } => path.as_deref(),
            CliError::Write { path, .. } => Some(path),
            _ => None,
        }
    }

    /// The machine-readable error document printed on stderr.
    pub fn to_json(&self) -> Value {
        let mut err = json!({ "kind": self.kind(), "message": self.to_string() });
        if let Some(p) = self.path() {
            err["path"] = json!(p.display().to_string());
        }
        json!({ "error": err })
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "indiscal", version, about = "Calibration analysis for LLM classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Query a backend over a dataset split and write a run artifact.
    Evaluate(EvaluateArgs),
    /// Average per-reference runs and emit the ECE/F1 versus J trend.
    Aggregate(AggregateArgs),
    /// Fit a post-hoc calibrator on validation artifacts and apply it.
    Calibrate(CalibrateArgs),
    /// Generate a synthetic population from a scenario spec.
    Simulate(SimulateArgs),
    /// Build a cross-condition report bundle from artifacts.
    Report(ReportArgs),
    /// Accuracy of the first answer with the target at each position.
    PositionDecay(PositionArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Independent,
    Comparative,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DecodeArg {
    FirstToken,
    PerLabel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExtractionArg {
    Raw,
    Normalized,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Test,
    Validation,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Temperature,
    Vector,
    Matrix,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Independent,
    Joint,
    Tied,
}

/// Options shared by every command that computes metrics.
#[derive(Debug, Clone, Default, Args)]
pub struct MetricArgs {
    /// Config JSON with `label_space`, `template` and `experiment`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub dkl_bins: Option<usize>,
    #[arg(long)]
    pub dkl_smoothing: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub metric: MetricArgs,
    /// JSONL dataset with `text`, `label` and optional `id`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// `mock:PATH`, `http` (endpoint from INDISCAL_ENDPOINT) or an endpoint URL.
    #[arg(long, default_value = "http")]
    pub backend: String,
    /// Model name for HTTP backends; defaults to INDISCAL_MODEL.
    #[arg(long)]
    pub model: Option<String>,
    /// Built-in template name, overriding the config.
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub shots: usize,
    /// Comparison references per prompt.
    #[arg(long)]
    pub refs: Option<usize>,
    #[arg(long)]
    pub test_cap: Option<usize>,
    #[arg(long)]
    pub val_cap: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "first-token")]
    pub decode: DecodeArg,
    #[arg(long, value_enum, default_value = "raw")]
    pub extraction: ExtractionArg,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
    /// Replicate index; the run seed is derived from the master seed and it.
    #[arg(long, default_value_t = 0)]
    pub replicate: usize,
    /// Draw one reference schedule per replicate rather than per sample.
    #[arg(long)]
    pub fixed_references: bool,
    #[arg(long)]
    pub no_prompts: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value = "independent")]
    pub mode: ModeArg,
    /// Reference sets J for comparative runs.
    #[arg(long)]
    pub sets: Option<usize>,
    #[arg(long, default_value = "run.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PositionArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Run artifacts; their reference sets are taken in the given order.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "aggregated.json")]
    pub out: PathBuf,
    /// Also write the trend table as CSV.
    #[arg(long)]
    pub trend: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Test-split run artifacts.
    #[arg(long, required = true, num_args = 1..)]
    pub test: Vec<PathBuf>,
    /// Validation-split run artifacts, in the same reference-set order.
    #[arg(long, required = true, num_args = 1..)]
    pub validation: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "vector")]
    pub kind: KindArg,
    #[arg(long, value_enum, default_value = "tied")]
    pub strategy: StrategyArg,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long, default_value = "calibrator.json")]
    pub params: PathBuf,
    /// Calibrated test artifact.
    #[arg(long, default_value = "calibrated.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario spec JSON.
    pub spec: PathBuf,
    #[command(flatten)]
    pub metric: MetricArgs,
    #[arg(long, default_value = "population.json")]
    pub out: PathBuf,
    /// Reliability diagram CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Artifact paths or glob patterns.
    #[arg(required = true)]
    pub artifacts: Vec<String>,
    /// Output directory for the bundle and CSV files.
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
    /// Recorded in the bundle; defaults to SOURCE_DATE_EPOCH when set.
    #[arg(long)]
    pub timestamp: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    label_space: Option<SpaceDoc>,
    #[serde(default)]
    template: Option<TemplateDoc>,
    #[serde(default)]
    experiment: Option<ExperimentConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SpaceDoc {
    Names(Vec<String>),
    Full(LabelSpace),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TemplateDoc {
    Builtin(String),
    Custom(Box<TaskTemplate>),
}

struct Setup {
    space: LabelSpace,
    template: TaskTemplate,
    config: ExperimentConfig,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| {
        CliError::Core(indiscal::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| CliError::Precondition {
        path: Some(path.to_path_buf()),
        message: format!("{}: {e}", path.display()),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(indiscal::Error::from)?;
    text.push('\n');
    write(path, &text)
}

fn builtin_space(template: &str) -> Option<LabelSpace> {
    let names: &[&str] = match template {
        "trec" => &["Abbreviation", "Entity", "Description and abstract concept", "Human being", "Location", "Numeric value"],
        "agnews" => &["World", "Sports", "Business", "Sci/Tech"],
        _ => return None,
    };
    LabelSpace::from_names(names).ok()
}

fn builtin_template(name: &str) -> Result<TaskTemplate> {
    TaskTemplate::builtin(name).ok_or_else(|| CliError::Usage(format!("unknown template {name:?}; built-ins are trec and agnews")))
}

fn load_setup(metric: &MetricArgs, template_override: Option<&str>) -> Result<Setup> {
    let file: ConfigFile = match &metric.config {
        Some(p) => parse_json(p, &read(p)?)?,
        None => ConfigFile::default(),
    };
    let template = match (template_override, file.template) {
        (Some(name), _) => builtin_template(name)?,
        (None, Some(TemplateDoc::Builtin(name))) => builtin_template(&name)?,
        (None, Some(TemplateDoc::Custom(t))) => *t,
        (None, None) => TaskTemplate::trec(),
    };
    template.validate()?;
    let space = match file.label_space {
        Some(SpaceDoc::Names(names)) => LabelSpace::from_names(&names)?,
        Some(SpaceDoc::Full(space)) => space,
        None => builtin_space(&template.name)
            .ok_or_else(|| CliError::Usage(format!("template {:?} needs a label_space in the config", template.name)))?,
    };
    let mut config = file.experiment.unwrap_or_default();
    apply_metric_flags(metric, &mut config);
    config.validate()?;
    Ok(Setup { space, template, config })
}

fn apply_metric_flags(metric: &MetricArgs, config: &mut ExperimentConfig) {
    if let Some(s) = metric.seed {
        config.master_seed = s;
    }
    if let Some(b) = metric.bins {
        config.n_bins = b;
    }
    if let Some(b) = metric.dkl_bins {
        config.dkl_bins = b;
    }
    if let Some(a) = metric.dkl_smoothing {
        config.dkl_smoothing = a;
    }
}

fn make_backend(args: &RunArgs, truth: &BTreeMap<String, usize>) -> Result<Box<dyn Backend>> {
    if let Some(path) = args.backend.strip_prefix("mock:") {
        let path = PathBuf::from(path);
        let text = read(&path)?;
        let mut spec: MockModelSpec = parse_json(&path, &text)?;
        for (id, label) in truth {
            spec.truth.entry(id.clone()).or_insert(*label);
        }
        return Ok(Box::new(MockModel::new(spec)?));
    }
    let mut backend = if args.backend == "http" {
        CompletionsBackend::from_env()
            .ok_or_else(|| CliError::Usage(format!("--backend http needs {}", indiscal::backend::http::ENDPOINT_ENV)))?
    } else if args.backend.starts_with("http://") || args.backend.starts_with("https://") {
        let key = std::env::var(indiscal::backend::http::API_KEY_ENV).ok();
        let model = std::env::var(indiscal::backend::http::MODEL_ENV).unwrap_or_default();
        CompletionsBackend::new(args.backend.clone(), model, key)
    } else {
        return Err(CliError::Usage(format!("unknown backend {:?}; use mock:PATH, http or a URL", args.backend)));
    };
    if let Some(m) = &args.model {
        backend.model = m.clone();
    }
    Ok(Box::new(backend))
}

fn run_options(args: &RunArgs, mode: InferenceMode, sets: usize) -> RunOptions {
    RunOptions {
        mode,
        shots: args.shots,
        reference_sets: sets,
        split: match args.split {
            SplitArg::Test => SplitKind::Test,
            SplitArg::Validation => SplitKind::Validation,
        },
        decode: match args.decode {
            DecodeArg::FirstToken => DecodeStrategy::FirstToken,
            DecodeArg::PerLabel => DecodeStrategy::PerLabelScoring,
        },
        extraction: match args.extraction {
            ExtractionArg::Raw => ExtractionMode::Raw,
            ExtractionArg::Normalized => ExtractionMode::Normalized,
        },
        fixed_references: args.fixed_references,
        parallelism: args.parallelism.max(1),
        keep_prompts: !args.no_prompts,
        ..RunOptions::default()
    }
}

struct Prepared {
    setup: Setup,
    splits: indiscal::model::DatasetSplits,
    backend: Box<dyn Backend>,
    run_seed: u64,
}

fn prepare(args: &RunArgs, sets: Option<usize>) -> Result<Prepared> {
    let mut setup = load_setup(&args.metric, args.template.as_deref())?;
    if let Some(r) = args.refs {
        setup.config.n_references = r;
    }
    if let Some(j) = sets {
        setup.config.n_reference_sets = j;
    }
    if let Some(c) = args.test_cap {
        setup.config.test_cap = c;
    }
    if let Some(c) = args.val_cap {
        setup.config.val_cap = c;
    }
    setup.config.validate()?;
    let splits = load_dataset(&args.dataset, &setup.space, &setup.config, setup.config.master_seed)?;
    let truth = splits
        .test
        .iter()
        .chain(&splits.validation)
        .filter_map(|s| s.label.map(|l| (s.id.clone(), l)))
        .collect();
    let backend = make_backend(args, &truth)?;
    let run_seed = replicate_seed(setup.config.master_seed, args.replicate);
    Ok(Prepared { setup, splits, backend, run_seed })
}

fn fmt_metric(v: &metrics::MetricValue) -> String {
    match v {
        metrics::MetricValue::Defined(x) => format!("{x:.4}"),
        metrics::MetricValue::Undefined(u) => u.reason.code().to_string(),
    }
}

fn summary_line(label: &str, r: &CalibrationReport, failures: usize) -> String {
    format!(
        "{label}: n={} accuracy={:.4} macro_f1={:.4} ece={:.4} macro_ce={} dkl={} failures={failures}",
        r.n,
        r.accuracy,
        r.macro_f1,
        r.ece,
        fmt_metric(&r.macro_ce),
        fmt_metric(&r.dkl)
    )
}

pub fn evaluate(args: &EvaluateArgs) -> Result<EvaluationRun> {
    let mode = match args.mode {
        ModeArg::Independent => InferenceMode::Independent,
        ModeArg::Comparative => InferenceMode::Comparative,
    };
    let p = prepare(&args.run, args.sets)?;
    let sets = p.setup.config.n_reference_sets;
    let opts = run_options(&args.run, mode, sets);
    let run = run_condition(&p.splits, &p.setup.template, &p.setup.space, p.backend.as_ref(), &opts, &p.setup.config, p.run_seed)?;
    write_json(&args.out, &run)?;
    println!("{}", summary_line(&run.condition.label(), &run.report()?, run.failures.len()));
    Ok(run)
}

pub fn position_decay(args: &PositionArgs) -> Result<Vec<indiscal::orchestrator::PositionAccuracy>> {
    let p = prepare(&args.run, Some(1))?;
    let opts = run_options(&args.run, InferenceMode::Comparative, 1);
    let table = position_decay_diagnostic(&p.splits, &p.setup.template, &p.setup.space, p.backend.as_ref(), &opts, &p.setup.config, p.run_seed)?;
    println!("position,accuracy,scored,failed");
    for row in &table {
        println!(
            "{},{},{},{}",
            row.position,
            row.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default(),
            row.scored,
            row.failed
        );
    }
    if let Some(out) = &args.out {
        write_json(out, &table)?;
    }
    Ok(table)
}

fn load_run(path: &Path) -> Result<EvaluationRun> {
    parse_json(path, &read(path)?)
}

/// Concatenate the reference sets of several artifacts into one run.
fn merge_runs(paths: &[PathBuf]) -> Result<EvaluationRun> {
    let mut merged: Option<EvaluationRun> = None;
    let mut sets = BTreeMap::new();
    let mut failures = Vec::new();
    for path in paths {
        let run = load_run(path)?;
        let own = match &run.per_reference_runs {
            Some(per) => per.values().cloned().collect::<Vec<_>>(),
            None => vec![run.records.clone()],
        };
        if let Some(first) = &merged {
            if first.label_space != run.label_space || first.condition.shots != run.condition.shots || first.condition.mode != run.condition.mode {
                return Err(CliError::Precondition {
                    path: Some(path.clone()),
                    message: format!("{} does not match the first artifact's condition or labels", path.display()),
                });
            }
        }
        for records in own {
            sets.insert(sets.len() + 1, records);
        }
        failures.extend(run.failures.iter().cloned());
        merged.get_or_insert(run);
    }
    let mut run = merged.ok_or_else(|| CliError::Usage("no run artifacts given".into()))?;
    run.per_reference_runs = Some(sets);
    run.failures = failures;
    Ok(run)
}

fn trend_csv(rows: &[TrendRow]) -> String {
    let mut out = String::from("j,ece,accuracy,macro_f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.j,
            report::round_sig(r.ece),
            report::round_sig(r.accuracy),
            report::round_sig(r.macro_f1)
        ));
    }
    out
}

pub fn aggregate(args: &AggregateArgs) -> Result<(EvaluationRun, Vec<TrendRow>)> {
    let run = merge_runs(&args.runs)?;
    let j = run.reference_set_count();
    let aggregated = aggregate_run(&run, j)?;
    let trend = aggregation_trend(&run)?;
    write_json(&args.out, &aggregated)?;
    let csv = trend_csv(&trend);
    if let Some(path) = &args.trend {
        write(path, &csv)?;
    }
    print!("{csv}");
    Ok((aggregated, trend))
}

/// Validation records, checked for labels and the validation split.
fn load_validation(path: &Path) -> Result<EvaluationRun> {
    let text = read(path)?;
    let doc: Value = parse_json(path, &text)?;
    let precondition = |message: String| CliError::Precondition { path: Some(path.to_path_buf()), message };
    let mut record_lists: Vec<&Value> = vec![&doc["records"]];
    if let Some(per) = doc["per_reference_runs"].as_object() {
        record_lists.extend(per.values());
    }
    for list in record_lists {
        let Some(items) = list.as_array() else { continue };
        if items.iter().any(|r| r.get("true_label").is_none_or(Value::is_null)) {
            return Err(precondition(format!("{}: validation records must carry gold labels", path.display())));
        }
    }
    let run: EvaluationRun = parse_json(path, &text)?;
    if run.provenance.split != SplitKind::Validation {
        return Err(precondition(format!("{} was not produced from the validation split", path.display())));
    }
    if run.records.is_empty() {
        return Err(precondition(format!("{} has no labelled records", path.display())));
    }
    Ok(run)
}

fn normalized(records: &[PredictionRecord]) -> Result<Vec<PredictionRecord>> {
    records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            if !r.estimate.normalized {
                out.estimate = renormalize(&r.estimate)?;
            }
            Ok(out)
        })
        .collect()
}

/// Validation data for J sets restricted to the samples every set scored,
/// in the order of set 1.
fn aligned_sets(per: &BTreeMap<usize, Vec<PredictionRecord>>) -> Result<BTreeMap<usize, (Vec<ProbabilityEstimate>, Vec<usize>)>> {
    let maps: BTreeMap<usize, BTreeMap<&str, &PredictionRecord>> =
        per.iter().map(|(j, rs)| (*j, rs.iter().map(|r| (r.sample_id.as_str(), r)).collect())).collect();
    let common: Vec<&PredictionRecord> = per[&1]
        .iter()
        .filter(|r| maps.values().all(|m| m.contains_key(r.sample_id.as_str())))
        .collect();
    let labels: Vec<usize> = common.iter().map(|r| r.true_label).collect();
    maps.iter()
        .map(|(j, m)| {
            let ests = common
                .iter()
                .map(|r| {
                    let e = &m[r.sample_id.as_str()].estimate;
                    if e.normalized {
                        Ok(e.clone())
                    } else {
                        renormalize(e)
                    }
                })
                .collect::<indiscal::Result<Vec<_>>>()?;
            Ok((*j, (ests, labels.clone())))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibratorFile {
    pub kind: CalibratorKind,
    pub strategy: Option<FitStrategy>,
    pub k: usize,
    pub j: usize,
    pub n_parameters: usize,
    /// Keyed by reference set; a single `"1"` entry for J = 1.
    pub calibrators: BTreeMap<usize, AffineCalibrator>,
    pub fit: BTreeMap<usize, FitReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BeforeAfter {
    pub before: CalibrationReport,
    pub after: CalibrationReport,
}

pub fn calibrate(args: &CalibrateArgs) -> Result<BeforeAfter> {
    let kind = match args.kind {
        KindArg::Temperature => CalibratorKind::Temperature,
        KindArg::Vector => CalibratorKind::Vector,
        KindArg::Matrix => CalibratorKind::Matrix,
    };
    let strategy = match args.strategy {
        StrategyArg::Independent => FitStrategy::Independent,
        StrategyArg::Joint => FitStrategy::Joint,
        StrategyArg::Tied => FitStrategy::Tied,
    };
    let defaults = FitConfig::default();
    let cfg = FitConfig {
        max_iters: args.max_iters.unwrap_or(defaults.max_iters),
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        tolerance: args.tolerance.unwrap_or(defaults.tolerance),
        l2_weight: args.l2.unwrap_or(defaults.l2_weight),
    };

    let mut val_sets = BTreeMap::new();
    for path in &args.validation {
        let run = load_validation(path)?;
        match run.per_reference_runs {
            Some(per) => per.into_values().for_each(|r| {
                val_sets.insert(val_sets.len() + 1, r);
            }),
            None => {
                val_sets.insert(val_sets.len() + 1, run.records);
            }
        }
    }
    let test = merge_runs(&args.test)?;
    let test_sets = test.per_reference_runs.clone().unwrap_or_default();
    if test_sets.len() != val_sets.len() {
        return Err(CliError::Precondition {
            path: None,
            message: format!("{} test reference sets but {} validation sets", test_sets.len(), val_sets.len()),
        });
    }
    let j = test_sets.len();
    let val = aligned_sets(&val_sets)?;
    let k = test.label_space.k();

    let (file, before_records, after_records) = if j == 1 {
        let (ests, labels) = &val[&1];
        let fit = fit_affine(ests, labels, kind, &cfg)?;
        let before = normalized(&test_sets[&1])?;
        let after = calibrate_records(&fit.calibrator, &before)?;
        let file = CalibratorFile {
            kind,
            strategy: None,
            k,
            j: 1,
            n_parameters: fit.calibrator.n_parameters(),
            calibrators: BTreeMap::from([(1, fit.calibrator)]),
            fit: BTreeMap::from([(1, fit.report)]),
        };
        (file, before, after)
    } else {
        let fit = fit_comparative(&val, kind, &cfg, strategy)?;
        let per: BTreeMap<usize, Vec<PredictionRecord>> =
            test_sets.iter().map(|(j, rs)| Ok((*j, normalized(rs)?))).collect::<Result<_>>()?;
        let after = calibrate_comparative_records(&fit.calibrator, &per)?;
        let mut agg_run = test.clone();
        agg_run.per_reference_runs = Some(per);
        let before = aggregate_run(&agg_run, j)?.records;
        let ComparativeCalibrator { per_reference, .. } = fit.calibrator.clone();
        let file = CalibratorFile {
            kind,
            strategy: Some(strategy),
            k,
            j,
            n_parameters: fit.calibrator.n_parameters(),
            calibrators: per_reference,
            fit: fit.reports,
        };
        (file, before, after)
    };
    write_json(&args.params, &file)?;

    let mut calibrated = test.clone();
    calibrated.condition = after_records[0].condition.clone();
    calibrated.records = after_records;
    calibrated.per_reference_runs = None;
    write_json(&args.out, &calibrated)?;

    let result = BeforeAfter {
        before: metrics::calibration_report(&before_records, &test.config)?,
        after: metrics::calibration_report(&calibrated.records, &test.config)?,
    };
    print!("{}", to_stable_json(&result)?);
    Ok(result)
}

pub fn simulate(args: &SimulateArgs) -> Result<EvaluationRun> {
    let text = read(&args.spec)?;
    let spec = ScenarioSpec::from_json(&text)?;
    let mut config = match &args.metric.config {
        Some(p) => parse_json::<ConfigFile>(p, &read(p)?)?.experiment.unwrap_or_default(),
        None => ExperimentConfig::default(),
    };
    apply_metric_flags(&args.metric, &mut config);
    config.validate()?;
    let records = generate_scenario(&spec)?;
    let run = scenario_run(&spec, records, &config);
    write_json(&args.out, &run)?;
    let diagram = metrics::bin_predictions(&run.records, config.n_bins)?;
    if let Some(csv) = &args.csv {
        write(csv, &reliability_csv(&diagram))?;
    }
    print!("{}", to_stable_json(&run.report()?)?);
    Ok(run)
}

fn expand(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut out = BTreeSet::new();
    for p in patterns {
        if p.contains(['*', '?', '[']) {
            let paths = glob::glob(p).map_err(|e| CliError::Usage(format!("bad pattern {p:?}: {e}")))?;
            let before = out.len();
            out.extend(paths.filter_map(std::result::Result::ok));
            if out.len() == before {
                return Err(CliError::Precondition { path: None, message: format!("pattern {p:?} matched no files") });
            }
        } else {
            out.insert(PathBuf::from(p));
        }
    }
    Ok(out.into_iter().collect())
}

pub fn report(args: &ReportArgs) -> Result<report::ReportBundle> {
    let paths = expand(&args.artifacts)?;
    let artifacts = paths
        .iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
            Ok((name, load_run(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let timestamp = args.timestamp.clone().or_else(|| std::env::var("SOURCE_DATE_EPOCH").ok());
    let bundle = build_report(&artifacts, timestamp)?;
    write(&args.out.join("bundle.json"), &to_stable_json(&bundle)?)?;
    let summary = summary_csv(&bundle);
    write(&args.out.join("summary.csv"), &summary)?;
    for (label, c) in &bundle.conditions {
        write(&args.out.join(format!("reliability_{}.csv", file_stem(label))), &reliability_csv(&c.reliability))?;
    }
    print!("{summary}");
    Ok(bundle)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Evaluate(a) => evaluate(&a).map(drop),
        Command::Aggregate(a) => aggregate(&a).map(drop),
        Command::Calibrate(a) => calibrate(&a).map(drop),
        Command::Simulate(a) => simulate(&a).map(drop),
        Command::Report(a) => report(&a).map(drop),
        Command::PositionDecay(a) => position_decay(&a).map(drop),
    }
}
