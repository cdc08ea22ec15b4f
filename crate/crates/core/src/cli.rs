//! Command-line entry points: experiment configs, seeded sweeps and reports.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Error;
use crate::metrics::{
    aggregate, ece, forgetting, recency_bias, stability_plasticity, Aggregation, CalibrationDump, CalibrationRecord,
    MetricSummary, RunReport, REPORT_SCHEMA_VERSION,
};
use crate::nets::ModelConfig;
use crate::snapshot::config_hash;
use crate::streams::{make_gcil_stream, make_split_stream, Allocation, ClassOrder, Dataset, GcilSpec, MixtureSpec, Scenario, TaskStream};
use crate::trainer::{train_stream, Method, RunOutcome, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "IMEXREG_OUTPUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or report input.
    Schema(String),
    Divergence { run_id: String, source: Error },
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => EXIT_SCHEMA,
            CliError::Divergence { .. } => EXIT_DIVERGENCE,
            CliError::Other(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Schema(m) => write!(f, "invalid input: {m}"),
            CliError::Divergence { run_id, source } => write!(f, "run {run_id} diverged: {source}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Mixture(MixtureSpec),
    /// Paths are resolved against the config file's directory.
    Csv { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub dataset: DatasetSpec,
    pub scenario: Scenario,
    #[serde(default)]
    pub tasks: Option<usize>,
    #[serde(default)]
    pub classes_per_task: Option<usize>,
    #[serde(default)]
    pub class_order: ClassOrder,
    #[serde(default)]
    pub samples_per_task: Option<usize>,
    #[serde(default)]
    pub max_classes: Option<usize>,
    #[serde(default)]
    pub longtail_exponent: Option<f64>,
}

impl StreamSpec {
    pub fn build(&self, base: &Path, seed: u64) -> crate::Result<TaskStream> {
        let data = match &self.dataset {
            DatasetSpec::Mixture(m) => m.generate()?,
            DatasetSpec::Csv { train, test } => Dataset::from_csv(base.join(train), base.join(test))?,
        };
        match self.scenario {
            Scenario::ClassIl | Scenario::TaskIl => {
                let per = self.classes_per_task.unwrap_or(2);
                let tasks = self.tasks.unwrap_or(data.num_classes / per.max(1));
                make_split_stream(&data, tasks, per, self.class_order, self.scenario, seed)
            }
            Scenario::GcilUniform | Scenario::GcilLongtail => {
                let d = GcilSpec::default();
                let spec = GcilSpec {
                    tasks: self.tasks.unwrap_or(d.tasks),
                    samples_per_task: self.samples_per_task.unwrap_or(d.samples_per_task),
                    max_classes: self.max_classes.unwrap_or(d.max_classes),
                    allocation: if self.scenario == Scenario::GcilUniform {
                        Allocation::Uniform
                    } else {
                        Allocation::Longtail
                    },
                    exponent: self.longtail_exponent.unwrap_or(d.exponent),
                };
                make_gcil_stream(&data, &spec, seed)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub encoder_widths: Option<Vec<usize>>,
    #[serde(default)]
    pub projection_widths: Option<Vec<usize>>,
    #[serde(default)]
    pub classifier_projection_widths: Option<Vec<usize>>,
}

impl ModelSpec {
    pub fn resolve(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        let d = ModelConfig::new(input_dim, num_classes);
        ModelConfig {
            encoder_widths: self.encoder_widths.clone().unwrap_or(d.encoder_widths),
            projection_widths: self.projection_widths.clone().unwrap_or(d.projection_widths),
            classifier_projection_widths: self
                .classifier_projection_widths
                .clone()
                .unwrap_or(d.classifier_projection_widths),
            ..d
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    #[serde(default = "default_bins")]
    pub ece_bins: usize,
    #[serde(default = "default_true")]
    pub use_max_trace: bool,
    #[serde(default)]
    pub aggregation: Aggregation,
}

fn default_bins() -> usize {
    15
}

fn default_true() -> bool {
    true
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            ece_bins: default_bins(),
            use_max_trace: true,
            aggregation: Aggregation::Mean,
        }
    }
}

/// On-disk experiment description. `train` holds either a complete training
/// configuration or a `preset` name plus field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub stream: StreamSpec,
    #[serde(default)]
    pub model: ModelSpec,
    pub train: Value,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub metrics: MetricsSpec,
}

fn merge(base: &mut Value, overrides: &Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Schema(format!("at `{}`: {}", e.path(), e.inner())))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Schema(format!(
                "at `schema_version`: expected {CONFIG_SCHEMA_VERSION}, found {}",
                cfg.schema_version
            )));
        }
        if cfg.seeds.is_empty() {
            return Err(CliError::Schema("at `seeds`: at least one seed is required".into()));
        }
        if cfg.methods.is_empty() {
            return Err(CliError::Schema("at `methods`: at least one method is required".into()));
        }
        cfg.train_config()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Resolves the `train` section into a complete configuration.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let Value::Object(obj) = &self.train else {
            return Err(CliError::Schema("at `train`: expected an object".into()));
        };
        let mut overrides = Value::Object(obj.clone());
        let preset = overrides.as_object_mut().and_then(|o| o.remove("preset"));
        let mut base = match preset {
            Some(Value::String(name)) => {
                let p = TrainConfig::preset(&name).map_err(|e| CliError::Schema(format!("at `train.preset`: {e}")))?;
                serde_json::to_value(p).map_err(other)?
            }
            Some(_) => return Err(CliError::Schema("at `train.preset`: expected a string".into())),
            None => serde_json::json!({ "method": "imex-reg" }),
        };
        merge(&mut base, &overrides);
        let cfg: TrainConfig = serde_path_to_error::deserialize(base)
            .map_err(|e| CliError::Schema(format!("at `train.{}`: {}", e.path(), e.inner())))?;
        cfg.validate().map_err(|e| CliError::Schema(format!("at `train`: {e}")))?;
        Ok(cfg)
    }
}

/// Text recorded in every report describing where this implementation
/// departs from, or fills gaps in, the method description.
pub fn deviations(cfg: &TrainConfig) -> Vec<String> {
    vec![
        "encoder is a ReLU multilayer perceptron without batch normalization".into(),
        format!("contrastive temperature tau = {} (not published; default 0.5)", cfg.weights.tau),
        format!(
            "consistency teacher targets: {}",
            match cfg.teacher_targets {
                crate::losses::TeacherTargets::Logits => "raw logits",
                crate::losses::TeacherTargets::Softmax => "softmax probabilities",
            }
        ),
        "two contrastive views per sample; cross-entropy on a weakly augmented view".into(),
        "plain SGD without momentum or weight decay".into(),
        "reservoir index drawn from 0..=N inclusive".into(),
        "stability and plasticity are means over tasks".into(),
    ]
}

pub fn run_id(method: Method, seed: u64) -> String {
    format!("{}-seed{seed}", method.name())
}

/// Scalar metrics of a finished run.
pub fn summarize(outcome: &RunOutcome, stream: &TaskStream, spec: &MetricsSpec) -> crate::Result<MetricSummary> {
    let (final_class_il, final_task_il) = match &outcome.joint {
        Some(j) => (mean(&j.class_il), mean(&j.task_il)),
        None => (outcome.class_il.final_average(), outcome.task_il.final_average()),
    };
    let multi = outcome.class_il.tasks() >= 2;
    let partition: Option<Vec<usize>> = stream.class_map().into_iter().collect();
    let partition = partition.filter(|_| matches!(stream.scenario, Scenario::ClassIl | Scenario::TaskIl));
    let test_tasks: Vec<usize> = stream.tasks.iter().flat_map(|t| t.test.iter().map(|s| s.task)).collect();
    let dump = match &partition {
        Some(map) => CalibrationDump::from_probabilities(&outcome.probabilities, &outcome.labels, map, stream.len())?,
        None => CalibrationDump {
            records: outcome
                .probabilities
                .iter()
                .zip(&outcome.labels)
                .zip(&test_tasks)
                .map(|((p, &y), &t)| {
                    let (arg, conf) = p.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                    CalibrationRecord {
                        confidence: conf,
                        correct: arg == y,
                        true_task: t,
                        task_mass: Vec::new(),
                    }
                })
                .collect(),
        },
    };
    Ok(MetricSummary {
        final_class_il,
        final_task_il,
        forgetting: if multi { Some(forgetting(&outcome.class_il, spec.use_max_trace)?) } else { None },
        forgetting_boundary: if multi { Some(forgetting(&outcome.class_il, false)?) } else { None },
        stability_plasticity: if multi {
            Some(stability_plasticity(&outcome.class_il, spec.aggregation)?)
        } else {
            None
        },
        ece: if dump.records.is_empty() { None } else { Some(ece(&dump, spec.ece_bins)?) },
        recency: match &partition {
            Some(map) if !outcome.probabilities.is_empty() => Some(recency_bias(&outcome.probabilities, map)?),
            _ => None,
        },
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed_override: Option<u64>,
    pub method: Option<Method>,
    pub preset: Option<String>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

pub struct RunSummary {
    pub output_dir: PathBuf,
    pub reports: Vec<RunReport>,
}

fn output_dir(cfg: &ExperimentConfig, opts: &RunOptions, config_path: &Path) -> PathBuf {
    if let Some(o) = &opts.out {
        return o.clone();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    let stem = config_path.file_stem().map_or_else(|| "experiment".into(), |s| s.to_os_string());
    match (&cfg.output_dir, root) {
        (Some(d), Some(r)) if d.is_relative() => r.join(d),
        (Some(d), _) => d.clone(),
        (None, Some(r)) => r.join(stem),
        (None, None) => Path::new("runs").join(stem),
    }
}

/// Trains one (method, seed) pair of an experiment. `base` resolves
/// relative dataset paths.
pub fn run_single(
    cfg: &ExperimentConfig,
    train: &TrainConfig,
    base: &Path,
    method: Method,
    seed: u64,
) -> Result<RunReport, CliError> {
    let id = run_id(method, seed);
    let stream = cfg.stream.build(base, seed).map_err(|e| CliError::Schema(format!("at `stream`: {e}")))?;
    let model = cfg.model.resolve(stream.dim, stream.num_classes);
    let tc = TrainConfig { method, seed, ..train.clone() }.effective();
    let outcome = train_stream(&stream, &model, &tc).map_err(|e| match e {
        Error::Divergence { .. } => CliError::Divergence {
            run_id: id.clone(),
            source: e,
        },
        e => CliError::Other(format!("run {id}: {e}")),
    })?;
    let metrics = summarize(&outcome, &stream, &cfg.metrics).map_err(other)?;
    let resolved = serde_json::json!({
        "stream": cfg.stream,
        "model": model,
        "train": tc,
        "metrics": cfg.metrics,
    });
    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        run_id: id,
        method: method.name().into(),
        seed,
        scenario: stream.scenario.name().into(),
        config_hash: format!("{:016x}", config_hash(&resolved)),
        config: resolved,
        class_il: outcome.class_il,
        task_il: outcome.task_il,
        joint: outcome.joint.map(|j| j.class_il),
        metrics,
        deviations: deviations(&tc),
    })
}

/// Executes every (method, seed) run of the experiment and writes one JSON
/// report per run plus `aggregate.json`.
pub fn run_experiment(config_path: &Path, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = opts.seed_override {
        cfg.seeds = vec![s];
    }
    if let Some(m) = opts.method {
        cfg.methods = vec![m];
    }
    if let Some(p) = &opts.preset {
        if let Value::Object(o) = &mut cfg.train {
            o.insert("preset".into(), Value::String(p.clone()));
        }
    }
    let train = cfg.train_config()?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let out = output_dir(&cfg, opts, config_path);

    let jobs: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let execute = |&(method, seed): &(Method, u64)| run_single(&cfg, &train, base, method, seed);
    let results: Vec<Result<RunReport, CliError>> = match opts.workers {
        Some(n) if n > 1 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(other)?
            .install(|| jobs.par_iter().map(execute).collect()),
        _ => jobs.iter().map(execute).collect(),
    };
    let reports: Vec<RunReport> = results.into_iter().collect::<Result<_, _>>()?;

    let runs_dir = out.join("runs");
    std::fs::create_dir_all(&runs_dir).map_err(|e| other(format!("{}: {e}", runs_dir.display())))?;
    for r in &reports {
        write_json(&runs_dir.join(format!("{}.json", r.run_id)), r)?;
    }
    write_json(&out.join("aggregate.json"), &aggregate(&reports))?;
    Ok(RunSummary {
        output_dir: out,
        reports,
    })
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(other)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| other(format!("{}: {e}", path.display())))
}

/// Loads every run report under `dir/runs` (or `dir` itself), sorted by
/// file name.
pub fn load_reports(dir: &Path) -> Result<Vec<RunReport>, CliError> {
    let runs = dir.join("runs");
    let scan = if runs.is_dir() { runs } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&scan)
        .map_err(|e| CliError::Schema(format!("{}: {e}", scan.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != "aggregate.json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Schema(format!("no run reports found in {}", scan.display())));
    }
    let mut reports = Vec::new();
    let mut bad = Vec::new();
    for f in &files {
        match std::fs::read_to_string(f)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<RunReport>(&t).map_err(|e| e.to_string()))
        {
            Ok(r) => reports.push(r),
            Err(e) => bad.push(format!("{}: {e}", f.display())),
        }
    }
    if !bad.is_empty() {
        return Err(CliError::Schema(format!("unreadable reports:\n  {}", bad.join("\n  "))));
    }
    Ok(reports)
}

pub const SUMMARY_COLUMNS: &[&str] = &[
    "run_id",
    "method",
    "seed",
    "scenario",
    "final_class_il",
    "final_task_il",
    "forgetting",
    "stability",
    "plasticity",
    "tradeoff",
    "ece",
    "recency",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// One row per run, best final class-IL accuracy first.
pub fn summary_rows(reports: &[RunReport]) -> Vec<Vec<String>> {
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    sorted.sort_by(|a, b| {
        b.metrics
            .final_class_il
            .total_cmp(&a.metrics.final_class_il)
            .then_with(|| a.run_id.cmp(&b.run_id))
    });
    sorted
        .into_iter()
        .map(|r| {
            let m = &r.metrics;
            let sp = m.stability_plasticity;
            vec![
                r.run_id.clone(),
                r.method.clone(),
                r.seed.to_string(),
                r.scenario.clone(),
                m.final_class_il.to_string(),
                m.final_task_il.to_string(),
                opt(m.forgetting.as_ref().map(|f| f.mean)),
                opt(sp.map(|s| s.stability)),
                opt(sp.map(|s| s.plasticity)),
                opt(sp.map(|s| s.tradeoff)),
                opt(m.ece),
                m.recency
                    .as_ref()
                    .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"))
                    .unwrap_or_default(),
            ]
        })
        .collect()
}

/// Writes `summary.csv` into `dir` and returns the aligned text table.
pub fn report(dir: &Path) -> Result<String, CliError> {
    let reports = load_reports(dir)?;
    let rows = summary_rows(&reports);
    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| other(format!("{}: {e}", path.display())))?;
    w.write_record(SUMMARY_COLUMNS).map_err(other)?;
    for r in &rows {
        w.write_record(r).map_err(other)?;
    }
    w.flush().map_err(other)?;

    let shown: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(i, c)| match c.parse::<f64>() {
                    Ok(v) if (4..=10).contains(&i) => format!("{v:.2}"),
                    _ if i == 11 => c
                        .split(';')
                        .filter_map(|x| x.parse::<f64>().ok())
                        .map(|x| format!("{x:.3}"))
                        .collect::<Vec<_>>()
                        .join(" "),
                    _ => c.clone(),
                })
                .collect()
        })
        .collect();
    let widths: Vec<usize> = (0..SUMMARY_COLUMNS.len())
        .map(|i| shown.iter().map(|r| r[i].len()).chain([SUMMARY_COLUMNS[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&mut out, SUMMARY_COLUMNS);
    for r in &shown {
        line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    Ok(out)
}

#[derive(Debug, Parser)]
#[command(name = "imexreg", version, about = "Continual-learning rehearsal experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every (method, seed) pair of an experiment config and write reports.
    Run {
        config: PathBuf,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Run only this method.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Start the training section from this hyperparameter preset.
        #[arg(long)]
        preset: Option<String>,
        /// Output directory (overrides the config and the output-root variable).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of runs executed in parallel.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarize the reports in a run directory as CSV and an aligned table.
    Report { dir: PathBuf },
}

fn parse_method(s: &str) -> Result<Method, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown method {s:?}; use imex-reg, er, sgd or joint"))
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with(args: impl IntoIterator<Item = OsString>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_SCHEMA } else { EXIT_OK };
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(sink, "{e}");
            return code;
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            seed_override,
            method,
            preset,
            out,
            workers,
        } => run_experiment(
            &config,
            &RunOptions {
                seed_override,
                method,
                preset,
                out,
                workers,
            },
        )
        .map(|s| {
            format!(
                "wrote {} run reports and aggregate.json to {}\n",
                s.reports.len(),
                s.output_dir.display()
            )
        }),
        Command::Report { dir } => report(&dir),
    };
    match result {
        Ok(text) => {
            let _ = write!(stdout, "{text}");
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
