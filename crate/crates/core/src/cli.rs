//! Experiment runner: layered configuration, `run` and `compare`.
//!
//! A config file (TOML, or JSON when the extension is `.json`) is read first
//! and command-line flags override it. Every run directory receives the fully
//! resolved config so a run can be repeated from its own output.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::{run_task, LearnerState, LossConfig, StrategyConfig, TaskReport, TrainConfig};
use crate::memory::{snapshot_buffer, MuaKind};
use crate::metrics::{acc, acc_sample_weighted, bwt};
use crate::model::ModelConfig;
use crate::stream::{
    load_dataset, make_synthetic, split_schedule, task_batches, Dataset, SyntheticSpec, TaskBatch, TaskSchedule,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    /// CSV manifest readable by [`load_dataset`].
    Manifest {
        path: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub pretrain_classes: usize,
    pub test_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            classes_per_task: 2,
            pretrain_classes: 0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub hidden_dim: usize,
    pub embedding_dim: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1, 0);
        Self {
            hidden_dim: m.hidden_dim,
            embedding_dim: m.embedding_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub buffer_size: usize,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub strategy: StrategyConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub model: ModelShape,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            buffer_size: 100,
            out: PathBuf::from("runs/latest"),
            dataset: DatasetConfig::default(),
            schedule: ScheduleConfig::default(),
            strategy: StrategyConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            model: ModelShape::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Load {
            path: path.to_path_buf(),
            source,
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
        }
    }

    /// Checks that need no data.
    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.loss.validate()?;
        let s = &self.schedule;
        if s.num_tasks == 0 || s.classes_per_task == 0 {
            return Err(Error::config("num_tasks and classes_per_task must be at least 1"));
        }
        if !(s.test_fraction > 0.0 && s.test_fraction < 1.0) {
            return Err(Error::config(format!(
                "test_fraction must be in (0, 1), got {}",
                s.test_fraction
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        let lr = self.train.optimizer.learning_rate;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning_rate must be positive, got {lr}")));
        }
        if self.model.hidden_dim == 0 || self.model.embedding_dim == 0 {
            return Err(Error::config("model dimensions must be at least 1"));
        }
        if self.buffer_size == 0 && self.strategy.kind != MuaKind::Finetune {
            return Err(Error::config(format!(
                "strategy {} needs buffer_size >= 1",
                self.strategy.kind
            )));
        }
        if let DatasetConfig::Synthetic(spec) = &self.dataset {
            let needed = s.pretrain_classes + s.num_tasks * s.classes_per_task;
            if needed > spec.num_classes {
                return Err(Error::config(format!(
                    "schedule needs {needed} classes but the synthetic dataset has {}",
                    spec.num_classes
                )));
            }
            if spec.per_class < 2 {
                return Err(Error::config("per_class must be at least 2 for a train/test split"));
            }
        }
        Ok(())
    }
}

/// Data and schedule shared by every strategy of a comparison.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub schedule: TaskSchedule,
    pub batches: Vec<TaskBatch>,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let dataset = match &config.dataset {
        DatasetConfig::Synthetic(spec) => make_synthetic(spec, config.seed)?,
        DatasetConfig::Manifest { path } => load_dataset(path)?,
    };
    let s = &config.schedule;
    let schedule = split_schedule(
        &dataset,
        s.num_tasks,
        s.classes_per_task,
        s.pretrain_classes,
        config.seed,
    )?;
    let batches = task_batches(&dataset, &schedule, s.test_fraction, config.seed)?;
    Ok(Prepared {
        dataset,
        schedule,
        batches,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub error: Option<String>,
    pub strategy: MuaKind,
    pub seed: u64,
    pub num_tasks: usize,
    pub tasks_completed: usize,
    pub acc: Option<f64>,
    pub bwt: Option<f64>,
    pub acc_sample_weighted: Option<f64>,
    pub backbone_calls: u64,
    pub head_calls: u64,
    pub buffer_len: usize,
    pub schedule: TaskSchedule,
    /// Dataset class name per head row.
    pub class_order: Vec<String>,
    pub wall_time_s: f64,
    /// Time spent scoring candidates and selecting the buffer.
    pub mua_time_s: f64,
}

/// Outcome of a run held in memory.
#[derive(Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub reports: Vec<TaskReport>,
    pub state: LearnerState,
}

/// Runs the task sequence, handing each report to `on_task` as it finishes.
///
/// A failure part-way still returns the outcome, with an incomplete summary.
pub fn execute(
    config: &ExperimentConfig,
    prepared: &Prepared,
    mut on_task: impl FnMut(&TaskReport, &LearnerState) -> Result<()>,
) -> Result<RunOutcome> {
    let started = Instant::now();
    let kind = config.strategy.kind;
    let model = ModelConfig {
        hidden_dim: config.model.hidden_dim,
        embedding_dim: config.model.embedding_dim,
        ..ModelConfig::new(
            prepared.dataset.feature_dim,
            prepared.schedule.class_order().len(),
            config.seed,
        )
    };
    let num_tasks = prepared.schedule.num_tasks();
    let mut state = LearnerState::new(model, config.buffer_size, kind, num_tasks, config.seed)?;

    let mut reports = Vec::with_capacity(prepared.batches.len());
    let mut failure = None;
    for batch in &prepared.batches {
        let step = run_task(&mut state, batch, &config.strategy, &config.loss, &config.train)
            .and_then(|report| on_task(&report, &state).map(|()| report));
        match step {
            Ok(report) => reports.push(report),
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }

    let complete = failure.is_none() && state.matrix.is_complete();
    let support = task_support(prepared);
    let summary = RunSummary {
        status: if complete {
            RunStatus::Complete
        } else {
            RunStatus::Incomplete
        },
        error: failure,
        strategy: kind,
        seed: config.seed,
        num_tasks,
        tasks_completed: state.matrix.rows().len(),
        acc: acc(&state.matrix).ok(),
        bwt: bwt(&state.matrix).ok(),
        acc_sample_weighted: acc_sample_weighted(&state.matrix, &support).ok(),
        backbone_calls: reports.iter().map(|r| r.backbone_calls).sum(),
        head_calls: reports.iter().map(|r| r.head_calls).sum(),
        buffer_len: state.buffer.len(),
        schedule: prepared.schedule.clone(),
        class_order: state
            .class_order()
            .iter()
            .map(|&c| prepared.dataset.class_names[c].clone())
            .collect(),
        wall_time_s: started.elapsed().as_secs_f64(),
        mua_time_s: reports.iter().map(|r| r.mua_time_s).sum(),
    };
    Ok(RunOutcome {
        summary,
        reports,
        state,
    })
}

/// Test samples per recorded task.
fn task_support(prepared: &Prepared) -> Vec<usize> {
    let Some(last) = prepared.batches.last() else {
        return Vec::new();
    };
    prepared
        .schedule
        .tasks
        .iter()
        .map(|classes| {
            last.test_cumulative
                .iter()
                .filter(|s| classes.contains(&s.label))
                .count()
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Runs one experiment and writes its artifacts under `config.out`.
pub fn run(config: &ExperimentConfig) -> Result<RunSummary> {
    let prepared = prepare(config)?;
    run_prepared(config, &prepared)
}

fn run_prepared(config: &ExperimentConfig, prepared: &Prepared) -> Result<RunSummary> {
    let out = &config.out;
    fs::create_dir_all(out)?;
    write_json(&out.join("resolved_config.json"), config)?;

    let mut tasks = BufWriter::new(File::create(out.join("tasks.jsonl"))?);
    let outcome = execute(config, prepared, |report, state| {
        serde_json::to_writer(&mut tasks, report)?;
        tasks.write_all(b"\n")?;
        tasks.flush()?;
        fs::write(out.join("acc_matrix.csv"), state.matrix.to_csv())?;
        Ok(())
    })?;
    drop(tasks);

    let summary = outcome.summary;
    fs::write(out.join("acc_matrix.csv"), outcome.state.matrix.to_csv())?;
    snapshot_buffer(&outcome.state.buffer, out.join("buffer.json"))?;
    outcome.state.classifier.save(out.join("model.ckpt"))?;
    write_json(&out.join("summary.json"), &summary)?;
    match &summary.error {
        Some(e) => Err(Error::Contract(format!(
            "run stopped after {} tasks: {e}",
            summary.tasks_completed
        ))),
        None => Ok(summary),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: MuaKind,
    pub acc: Option<f64>,
    pub bwt: Option<f64>,
    pub backbone_calls: Option<u64>,
    pub head_calls: Option<u64>,
    pub wall_time_s: Option<f64>,
    pub mua_time_s: Option<f64>,
    pub status: String,
    pub error: Option<String>,
}

/// Runs each strategy on the same data and seed, one subdirectory per
/// strategy, and writes `comparison.csv` to `config.out`.
pub fn compare(config: &ExperimentConfig, strategies: &[MuaKind]) -> Result<Vec<ComparisonRow>> {
    if strategies.is_empty() {
        return Err(Error::config("compare needs at least one strategy"));
    }
    let configs: Vec<ExperimentConfig> = strategies
        .iter()
        .map(|&kind| {
            let mut c = config.clone();
            c.strategy.kind = kind;
            c.out = config.out.join(kind.name());
            c.validate().map(|()| c)
        })
        .collect::<Result<_>>()?;
    let prepared = prepare(config)?;

    let rows: Vec<ComparisonRow> = configs
        .iter()
        .map(|c| match run_prepared(c, &prepared) {
            Ok(s) => ComparisonRow {
                strategy: s.strategy,
                acc: s.acc,
                bwt: s.bwt,
                backbone_calls: Some(s.backbone_calls),
                head_calls: Some(s.head_calls),
                wall_time_s: Some(s.wall_time_s),
                mua_time_s: Some(s.mua_time_s),
                status: "complete".into(),
                error: None,
            },
            Err(e) => ComparisonRow {
                strategy: c.strategy.kind,
                acc: None,
                bwt: None,
                backbone_calls: None,
                head_calls: None,
                wall_time_s: None,
                mua_time_s: None,
                status: "failed".into(),
                error: Some(e.to_string()),
            },
        })
        .collect();

    fs::create_dir_all(&config.out)?;
    let mut w = csv::Writer::from_path(config.out.join("comparison.csv")).map_err(csv_error)?;
    w.write_record([
        "strategy",
        "acc",
        "bwt",
        "backbone_calls",
        "head_calls",
        "wall_time_s",
        "mua_time_s",
        "status",
        "error",
    ])
    .map_err(csv_error)?;
    for r in &rows {
        let cell = |v: Option<String>| v.unwrap_or_default();
        w.write_record([
            r.strategy.name().to_string(),
            cell(r.acc.map(|v| v.to_string())),
            cell(r.bwt.map(|v| v.to_string())),
            cell(r.backbone_calls.map(|v| v.to_string())),
            cell(r.head_calls.map(|v| v.to_string())),
            cell(r.wall_time_s.map(|v| v.to_string())),
            cell(r.mua_time_s.map(|v| v.to_string())),
            r.status.clone(),
            cell(r.error.clone()),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    Error::format(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "rainbow-cl",
    version,
    about = "Replay-based class-incremental learning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one strategy over the task sequence.
    Run(Overrides),
    /// Run several strategies on identical data and write comparison.csv.
    Compare {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated strategies; all of them when omitted.
        #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
        strategies: Vec<MuaKind>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl From<Toggle> for bool {
    fn from(t: Toggle) -> bool {
        t == Toggle::On
    }
}

fn parse_kind(s: &str) -> std::result::Result<MuaKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    pub strategy: Option<MuaKind>,
    #[arg(long)]
    pub buffer_size: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub classes_per_task: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub kd: Option<Toggle>,
    #[arg(long)]
    pub mixup: Option<Toggle>,
    #[arg(long)]
    pub k_perturb: Option<usize>,
    #[arg(long)]
    pub lambda_noise: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Overrides {
    /// File first (or defaults), then flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.strategy {
            c.strategy.kind = v;
        }
        if let Some(v) = self.buffer_size {
            c.buffer_size = v;
        }
        if let Some(v) = self.tasks {
            c.schedule.num_tasks = v;
        }
        if let Some(v) = self.classes_per_task {
            c.schedule.classes_per_task = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.kd {
            c.loss.kd_enabled = v.into();
        }
        if let Some(v) = self.mixup {
            c.loss.mixup_enabled = v.into();
        }
        if let Some(v) = self.k_perturb {
            c.strategy.k_perturb = v;
        }
        if let Some(v) = self.lambda_noise {
            c.strategy.lambda_noise = v;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Entry point: 0 on success, 2 on configuration errors, 1 otherwise.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Run(o) => o.resolve().and_then(|c| run(&c)).map(|s| {
            println!(
                "{}: ACC {} BWT {} backbone calls {}",
                s.strategy,
                fmt_opt(s.acc),
                fmt_opt(s.bwt),
                s.backbone_calls
            );
        }),
        Command::Compare { overrides, strategies } => {
            let kinds = if strategies.is_empty() {
                MuaKind::ALL.to_vec()
            } else {
                strategies.clone()
            };
            overrides.resolve().and_then(|c| compare(&c, &kinds)).and_then(|rows| {
                for r in &rows {
                    println!(
                        "{}: ACC {} BWT {} {}",
                        r.strategy,
                        fmt_opt(r.acc),
                        fmt_opt(r.bwt),
                        r.status
                    );
                }
                match rows.iter().find(|r| r.error.is_some()) {
                    Some(r) => Err(Error::Contract(format!("{} failed", r.strategy))),
                    None => Ok(()),
                }
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}
