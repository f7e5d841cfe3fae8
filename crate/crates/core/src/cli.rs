//! `nowcast-kit` command line: synth, pretrain, finetune, evaluate, estimate, baseline, report.

use std::collections::BTreeMap;
use std::fs;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::baselines::ZrParams;
use crate::dataset::{make_splits, DataStore, Phase, SampleSet, Split, SplitCatalog};
use crate::grid::DEFAULT_R_MAX;
use crate::losses::{ClassLoss, DEFAULT_GAMMA};
use crate::metrics::REPORT_HEADER;
use crate::model::{dim_plan, ModelConfig, REFERENCE_BASE_CHANNELS, REFERENCE_DEPTH, REFERENCE_INPUT_HW};
use crate::synth::{gen_imbalanced_set, SynthPlan, SynthScenario};
use crate::trainer::{
    estimate_with_model, estimate_with_zr, estimation_csv, evaluate_nowcast, evaluate_persistence, evaluate_pretrain,
    finetune_estimation, finetune_nowcast, pretrain, Checkpoint, Task, TrainConfig, TrainOutcome, TrainPhase,
};

/// Environment variable capping worker threads (default 1).
pub const THREADS_ENV: &str = "NOWCAST_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("invalid value for {key}: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("{0}")]
    Domain(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "nowcast-kit", version, about = "Radar precipitation nowcasting and estimation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic data directory.
    Synth(SynthArgs),
    /// Reflectivity pre-training with the earth-mover loss.
    Pretrain(PretrainArgs),
    /// Fine-tune for nowcasting or estimation.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a data split.
    Evaluate(EvaluateArgs),
    /// Write per-station accumulation estimates from an estimation checkpoint.
    Estimate(EstimateArgs),
    /// Score a non-learned baseline.
    Baseline(BaselineArgs),
    /// Merge run reports into a comparison table and training curves.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid side length in cells.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Model depth whose output patch receives the stations.
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 40)]
    pub train_sequences: usize,
    #[arg(long, default_value_t = 6)]
    pub val_sequences: usize,
    #[arg(long, default_value_t = 8)]
    pub test_sequences: usize,
    #[arg(long, default_value_t = 48)]
    pub sequence_frames: usize,
    #[arg(long, default_value_t = 40)]
    pub stations: usize,
    /// Target HEAVY label fraction.
    #[arg(long, default_value_t = 0.02)]
    pub prevalence: f64,
    /// Steering speed limit in cells per 10 minutes (0 gives stationary fields).
    #[arg(long, default_value_t = 0.5)]
    pub max_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Nowcast,
    Estimation,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Nowcast => Task::Nowcast,
            TaskArg::Estimation => Task::Estimation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Csi,
    Focal,
    Ce,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// key=value training configuration; missing keys take the published defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Nowcast)]
    pub task: TaskArg,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Nowcast)]
    pub task: TaskArg,
    /// Overrides the configuration's `loss` key (nowcast only).
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Pre-trained checkpoint, or `none` to train from scratch.
    #[arg(long)]
    pub pretrained: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Persistence,
    Zr,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Z-R parameter file (`a=…`, `b=…`); defaults to a=200, b=1.49.
    #[arg(long)]
    pub zr_params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories containing `report.csv` and `metrics.log`.
    #[arg(long, required = true, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Training options read from a `key=value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub r_max: u32,
    /// Mean-pooling factor applied to the radar grids before training.
    pub pool_factor: usize,
}

pub const CONFIG_KEYS: [&str; 12] = [
    "steps",
    "batch_size",
    "learning_rate",
    "validation_interval",
    "seed",
    "loss",
    "gamma",
    "depth",
    "base_channels",
    "input_hw",
    "r_max",
    "pool_factor",
];

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| CliError::InvalidValue {
        key: key.into(),
        reason: format!("{v:?}: {e}"),
    })
}

fn positive<T: PartialOrd + Default + Copy>(key: &str, v: T) -> Result<T, CliError> {
    if v > T::default() {
        Ok(v)
    } else {
        Err(CliError::InvalidValue {
            key: key.into(),
            reason: "must be positive".into(),
        })
    }
}

/// Parses `key=value` lines (`#` starts a comment); unknown keys are rejected.
pub fn parse_config_text(text: &str, path: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| CliError::Parse {
            path: path.into(),
            line: i + 1,
            reason,
        };
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if !CONFIG_KEYS.contains(&k) {
            return Err(err(format!("unknown key {k:?}")));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(err(format!("duplicate key {k:?}")));
        }
    }
    Ok(map)
}

/// Resolves a parsed map into a configuration for `phase`.
pub fn resolve_config(map: &BTreeMap<String, String>, phase: TrainPhase) -> Result<RunConfig, CliError> {
    let get = |k: &str| map.get(k).map(String::as_str);
    let task = phase.task();
    let r_max: u32 = match get("r_max") {
        Some(v) => positive("r_max", parse_value("r_max", v)?)?,
        None => DEFAULT_R_MAX,
    };
    let out_channels = match phase {
        TrainPhase::Pretrain(_) => r_max as usize,
        TrainPhase::FinetuneNowcast => 3,
        TrainPhase::FinetuneEstimation => 1,
    };
    let model = ModelConfig {
        depth: get("depth").map(|v| parse_value("depth", v)).transpose()?.unwrap_or(REFERENCE_DEPTH),
        base_channels: match get("base_channels") {
            Some(v) => positive("base_channels", parse_value("base_channels", v)?)?,
            None => REFERENCE_BASE_CHANNELS,
        },
        in_channels: task.in_channels(),
        out_channels,
        input_hw: match get("input_hw") {
            Some(v) => positive("input_hw", parse_value("input_hw", v)?)?,
            None => REFERENCE_INPUT_HW,
        },
    };
    let mut train = TrainConfig::defaults(phase, model);
    if let Some(v) = get("steps") {
        train.steps = positive("steps", parse_value("steps", v)?)?;
    }
    if let Some(v) = get("batch_size") {
        train.batch_size = positive("batch_size", parse_value("batch_size", v)?)?;
    }
    if let Some(v) = get("learning_rate") {
        let lr: f64 = parse_value("learning_rate", v)?;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(CliError::InvalidValue {
                key: "learning_rate".into(),
                reason: "must be positive and finite".into(),
            });
        }
        train.learning_rate = lr;
    }
    if let Some(v) = get("validation_interval") {
        train.validation_interval = positive("validation_interval", parse_value("validation_interval", v)?)?;
    }
    if let Some(v) = get("seed") {
        train.seed = parse_value("seed", v)?;
    }
    let gamma = match get("gamma") {
        Some(v) => {
            let g: f64 = parse_value("gamma", v)?;
            if !(g >= 0.0 && g.is_finite()) {
                return Err(CliError::InvalidValue {
                    key: "gamma".into(),
                    reason: "must be non-negative".into(),
                });
            }
            g
        }
        None => DEFAULT_GAMMA,
    };
    train.loss = match get("loss") {
        None | Some("csi") => ClassLoss::Csi,
        Some("ce") => ClassLoss::CrossEntropy,
        Some("focal") => ClassLoss::Focal { gamma },
        Some(other) => {
            return Err(CliError::InvalidValue {
                key: "loss".into(),
                reason: format!("{other:?} is not one of csi, focal, ce"),
            })
        }
    };
    let pool_factor = match get("pool_factor") {
        Some(v) => positive("pool_factor", parse_value("pool_factor", v)?)?,
        None => 1,
    };
    Ok(RunConfig {
        train,
        r_max,
        pool_factor,
    })
}

/// Reads a configuration file; an empty file yields the published defaults.
pub fn load_config(path: impl AsRef<Path>, phase: TrainPhase) -> Result<RunConfig, CliError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    resolve_config(&parse_config_text(&text, &path.display().to_string())?, phase)
}

impl RunConfig {
    /// Fully resolved configuration in the file format.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let (loss, gamma) = match t.loss {
            ClassLoss::Csi => ("csi", DEFAULT_GAMMA),
            ClassLoss::CrossEntropy => ("ce", DEFAULT_GAMMA),
            ClassLoss::Focal { gamma } => ("focal", gamma),
        };
        format!(
            "phase={}\nsteps={}\nbatch_size={}\nlearning_rate={:?}\nvalidation_interval={}\nseed={}\nloss={loss}\n\
             gamma={gamma:?}\ndepth={}\nbase_channels={}\nin_channels={}\nout_channels={}\ninput_hw={}\nr_max={}\npool_factor={}\n",
            t.phase,
            t.steps,
            t.batch_size,
            t.learning_rate,
            t.validation_interval,
            t.seed,
            t.model.depth,
            t.model.base_channels,
            t.model.in_channels,
            t.model.out_channels,
            t.model.input_hw,
            self.r_max,
            self.pool_factor
        )
    }
}

/// What an accepted invocation is about to do.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    pub options: BTreeMap<String, String>,
    pub output: PathBuf,
}

impl RunManifest {
    pub fn text(&self) -> String {
        let mut out = format!("subcommand={}\n", self.subcommand);
        out.push_str(&format!(
            "config={}\n",
            self.config_path.as_ref().map_or("none".into(), |p| p.display().to_string())
        ));
        out.push_str(&format!("output={}\n", self.output.display()));
        for (k, v) in &self.options {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// Directory targets get `manifest.echo` inside; file targets get `<file>.manifest`.
    pub fn write(&self, output_is_dir: bool) -> Result<(), CliError> {
        let path = if output_is_dir {
            fs::create_dir_all(&self.output).map_err(io_err(&self.output))?;
            self.output.join("manifest.echo")
        } else {
            if let Some(parent) = self.output.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            let mut name = self.output.as_os_str().to_owned();
            name.push(".manifest");
            PathBuf::from(name)
        };
        fs::write(&path, self.text()).map_err(io_err(&path))
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body).map_err(io_err(path))
}

/// Loads a data directory, its splits (or date-derived ones) and applies pooling.
fn load_data(dir: &Path, r_max: u32, pool_factor: usize) -> Result<(DataStore, SplitCatalog), CliError> {
    let mut store = DataStore::load_dir(dir, r_max).map_err(|e| CliError::Domain(format!("{}: {e}", dir.display())))?;
    if pool_factor > 1 {
        store = store.pooled(pool_factor).map_err(domain)?;
    }
    let splits_dir = dir.join("splits");
    let splits = if splits_dir.is_dir() {
        SplitCatalog::read_dir(&splits_dir).map_err(domain)?
    } else {
        let ts: Vec<i64> = store.timestamps().collect();
        make_splits(&ts).map_err(domain)?
    };
    Ok((store, splits))
}

fn anchors(store: &DataStore, splits: &SplitCatalog, phase: Phase, split: Split, task: Task) -> Vec<i64> {
    store.usable_anchors(splits.get(phase, split), task == Task::Nowcast)
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

fn options(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn resolve_run_config(config: Option<&Path>, phase: TrainPhase) -> Result<RunConfig, CliError> {
    match config {
        Some(p) => load_config(p, phase),
        None => resolve_config(&BTreeMap::new(), phase),
    }
}

/// Trains, streaming `metrics.log`, then writes `best.ckpt`, `best.meta` and `report.csv`.
fn train_run(
    out: &Path,
    run: &RunConfig,
    data: &Path,
    init: Option<&Checkpoint>,
) -> Result<(), CliError> {
    write_file(&out.join("config.echo"), &run.echo())?;
    let (store, splits) = load_data(data, run.r_max, run.pool_factor)?;
    let cfg = &run.train;
    let task = cfg.phase.task();
    let phase = match cfg.phase {
        TrainPhase::Pretrain(_) => Phase::Pretrain,
        _ => Phase::Finetune,
    };
    let train = SampleSet::new(&store, anchors(&store, &splits, phase, Split::Train, task));
    let val = SampleSet::new(&store, anchors(&store, &splits, phase, Split::Val, task));
    let log_path = out.join("metrics.log");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let mut log_error = None;
    let mut observer = |p: &crate::trainer::ValidationPoint| {
        if log_error.is_none() {
            if let Err(e) = writeln!(log, "{}", p.log_line()) {
                log_error = Some(e);
            }
        }
    };
    let outcome: TrainOutcome = match cfg.phase {
        TrainPhase::Pretrain(_) => pretrain(cfg, &train, &val, &mut observer),
        TrainPhase::FinetuneNowcast => finetune_nowcast(cfg, init, &train, &val, &mut observer),
        TrainPhase::FinetuneEstimation => finetune_estimation(cfg, init, &train, &val, &mut observer),
    }
    .map_err(domain)?;
    if let Some(e) = log_error {
        return Err(io_err(&log_path)(e));
    }
    outcome.best.save(out.join("best.ckpt")).map_err(domain)?;

    let test = SampleSet::new(&store, anchors(&store, &splits, Phase::Finetune, Split::Test, task));
    let report = report_for(&outcome.best, &test)?;
    write_file(&out.join("report.csv"), &report)
}

fn report_for(ckpt: &Checkpoint, set: &SampleSet) -> Result<String, CliError> {
    if set.is_empty() {
        return Err(CliError::Domain("evaluation split has no usable samples".into()));
    }
    Ok(match ckpt.phase {
        TrainPhase::Pretrain(_) => format!("split,emd\nevaluated,{:.6}\n", evaluate_pretrain(ckpt, set).map_err(domain)?),
        TrainPhase::FinetuneNowcast => evaluate_nowcast(ckpt, set).map_err(domain)?.report.to_csv(),
        TrainPhase::FinetuneEstimation => estimation_csv(&estimate_with_model(ckpt, set).map_err(domain)?),
    })
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let manifest = RunManifest {
        subcommand: "synth".into(),
        config_path: None,
        options: options(&[
            ("seed", a.seed.to_string()),
            ("size", a.size.to_string()),
            ("depth", a.depth.to_string()),
            ("train_sequences", a.train_sequences.to_string()),
            ("val_sequences", a.val_sequences.to_string()),
            ("test_sequences", a.test_sequences.to_string()),
            ("sequence_frames", a.sequence_frames.to_string()),
            ("stations", a.stations.to_string()),
            ("prevalence", format!("{:?}", a.prevalence)),
            ("max_speed", format!("{:?}", a.max_speed)),
        ]),
        output: a.out.clone(),
    };
    manifest.write(true)?;
    let model = ModelConfig {
        depth: a.depth,
        base_channels: 1,
        in_channels: 1,
        out_channels: 1,
        input_hw: a.size,
    };
    let plan = dim_plan(&model).map_err(domain)?;
    let scenario = SynthScenario {
        height: a.size,
        width: a.size,
        heavy_prevalence: a.prevalence,
        max_speed: a.max_speed,
        ..SynthScenario::desk(a.seed)
    };
    let synth_plan = SynthPlan {
        train_sequences: a.train_sequences,
        val_sequences: a.val_sequences,
        test_sequences: a.test_sequences,
        sequence_frames: a.sequence_frames,
        n_stations: a.stations,
        patch_offset: plan.offset,
        patch_size: plan.output_hw,
    };
    let data = gen_imbalanced_set(&scenario, &synth_plan).map_err(domain)?;
    data.write_dir(&a.out).map_err(domain)?;
    write_file(&a.out.join("scenario.echo"), &format!("{:#?}\n", data.scenario))
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<(), CliError> {
    let run = resolve_run_config(a.config.as_deref(), TrainPhase::Pretrain(a.task.into()))?;
    let mut opts = options(&[("data", a.data.display().to_string())]);
    opts.extend(run.echo().lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.to_string(), v.to_string())));
    RunManifest {
        subcommand: "pretrain".into(),
        config_path: a.config.clone(),
        options: opts,
        output: a.out.clone(),
    }
    .write(true)?;
    train_run(&a.out, &run, &a.data, None)
}

fn cmd_finetune(a: &FinetuneArgs) -> Result<(), CliError> {
    let task: Task = a.task.into();
    let phase = match task {
        Task::Nowcast => TrainPhase::FinetuneNowcast,
        Task::Estimation => TrainPhase::FinetuneEstimation,
    };
    let mut run = resolve_run_config(a.config.as_deref(), phase)?;
    if let Some(l) = a.loss {
        if task == Task::Estimation {
            return Err(CliError::InvalidValue {
                key: "loss".into(),
                reason: "estimation fine-tuning always uses the sum of squared errors".into(),
            });
        }
        let gamma = match run.train.loss {
            ClassLoss::Focal { gamma } => gamma,
            _ => DEFAULT_GAMMA,
        };
        run.train.loss = match l {
            LossArg::Csi => ClassLoss::Csi,
            LossArg::Ce => ClassLoss::CrossEntropy,
            LossArg::Focal => ClassLoss::Focal { gamma },
        };
    }
    let mut opts = options(&[
        ("data", a.data.display().to_string()),
        ("pretrained", a.pretrained.clone()),
    ]);
    opts.extend(run.echo().lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.to_string(), v.to_string())));
    RunManifest {
        subcommand: "finetune".into(),
        config_path: a.config.clone(),
        options: opts,
        output: a.out.clone(),
    }
    .write(true)?;
    let init = if a.pretrained == "none" {
        None
    } else {
        let c = Checkpoint::load(&a.pretrained).map_err(domain)?;
        if c.phase.task() != task {
            return Err(CliError::Domain(format!(
                "pre-trained checkpoint is a {} model, fine-tuning a {} model",
                c.phase.task().name(),
                task.name()
            )));
        }
        Some(c)
    };
    train_run(&a.out, &run, &a.data, init.as_ref())
}

fn load_for_eval(ckpt: &Path, data: &Path) -> Result<(Checkpoint, DataStore, SplitCatalog), CliError> {
    let c = Checkpoint::load(ckpt).map_err(domain)?;
    let r_max = match c.phase {
        TrainPhase::Pretrain(_) => c.model.out_channels as u32,
        _ => DEFAULT_R_MAX,
    };
    let (store, splits) = load_data(data, r_max, 1)?;
    Ok((c, store, splits))
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    RunManifest {
        subcommand: "evaluate".into(),
        config_path: None,
        options: options(&[
            ("ckpt", a.ckpt.display().to_string()),
            ("data", a.data.display().to_string()),
            ("split", format!("{:?}", a.split).to_lowercase()),
        ]),
        output: a.out.clone(),
    }
    .write(false)?;
    let (c, store, splits) = load_for_eval(&a.ckpt, &a.data)?;
    let set = SampleSet::new(&store, anchors(&store, &splits, Phase::Finetune, split_of(a.split), c.phase.task()));
    write_file(&a.out, &report_for(&c, &set)?)
}

fn cmd_estimate(a: &EstimateArgs) -> Result<(), CliError> {
    RunManifest {
        subcommand: "estimate".into(),
        config_path: None,
        options: options(&[
            ("ckpt", a.ckpt.display().to_string()),
            ("data", a.data.display().to_string()),
            ("split", format!("{:?}", a.split).to_lowercase()),
        ]),
        output: a.out.clone(),
    }
    .write(false)?;
    let (c, store, splits) = load_for_eval(&a.ckpt, &a.data)?;
    let set = SampleSet::new(&store, anchors(&store, &splits, Phase::Finetune, split_of(a.split), Task::Estimation));
    let pairs = estimate_with_model(&c, &set).map_err(domain)?;
    let mut body = String::from("timestamp_minutes,station_id,estimate_mm,observed_mm\n");
    for p in pairs {
        body.push_str(&format!(
            "{},{},{:?},{:?}\n",
            p.timestamp,
            store.stations().stations()[p.station].id,
            p.predicted,
            p.truth
        ));
    }
    write_file(&a.out, &body)
}

fn cmd_baseline(a: &BaselineArgs) -> Result<(), CliError> {
    RunManifest {
        subcommand: "baseline".into(),
        config_path: None,
        options: options(&[
            ("method", format!("{:?}", a.method).to_lowercase()),
            ("data", a.data.display().to_string()),
            ("split", format!("{:?}", a.split).to_lowercase()),
            (
                "zr_params",
                a.zr_params.as_ref().map_or("default".into(), |p| p.display().to_string()),
            ),
        ]),
        output: a.out.clone(),
    }
    .write(false)?;
    let (store, splits) = load_data(&a.data, DEFAULT_R_MAX, 1)?;
    let body = match a.method {
        MethodArg::Persistence => {
            let set = SampleSet::new(&store, anchors(&store, &splits, Phase::Finetune, split_of(a.split), Task::Nowcast));
            evaluate_persistence(&set).report.to_csv()
        }
        MethodArg::Zr => {
            let params = match &a.zr_params {
                Some(p) => ZrParams::read(p).map_err(domain)?,
                None => ZrParams::FITTED,
            };
            let set =
                SampleSet::new(&store, anchors(&store, &splits, Phase::Finetune, split_of(a.split), Task::Estimation));
            estimation_csv(&estimate_with_zr(params, &set).map_err(domain)?)
        }
    };
    write_file(&a.out, &body)
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Merges per-lead report rows side by side; a single report passes through unchanged.
pub fn merge_reports(named: &[(String, String)]) -> Result<String, CliError> {
    if let [(_, only)] = named {
        return Ok(only.clone());
    }
    let mut header = String::from("lead_minutes");
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    for (i, (name, text)) in named.iter().enumerate() {
        let mut lines = text.lines();
        let head = lines.next().unwrap_or("");
        if !head.starts_with(REPORT_HEADER) {
            return Err(CliError::Domain(format!("{name}: not a nowcast report")));
        }
        for col in head.split(',').skip(1) {
            header.push_str(&format!(",{name}:{col}"));
        }
        let body: Vec<_> = lines.filter(|l| !l.is_empty()).collect();
        if i == 0 {
            rows = body
                .iter()
                .map(|l| {
                    let mut f = l.split(',');
                    (f.next().unwrap_or("").to_string(), f.map(String::from).collect())
                })
                .collect();
        } else {
            if body.len() != rows.len() {
                return Err(CliError::Domain(format!("{name}: lead rows differ from the first report")));
            }
            for (row, l) in rows.iter_mut().zip(body) {
                let mut f = l.split(',');
                if f.next() != Some(row.0.as_str()) {
                    return Err(CliError::Domain(format!("{name}: lead rows differ from the first report")));
                }
                row.1.extend(f.map(String::from));
            }
        }
    }
    let mut out = header;
    out.push('\n');
    for (lead, vals) in rows {
        out.push_str(&lead);
        for v in vals {
            out.push(',');
            out.push_str(&v);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes `comparison.csv` plus `curves/<run>.csv` (one row per validation point).
pub fn report_tables(runs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut named = Vec::new();
    for dir in runs {
        let path = dir.join("report.csv");
        let text = fs::read_to_string(&path).map_err(|e| CliError::Domain(format!("missing report {}: {e}", path.display())))?;
        named.push((run_name(dir), text));
    }
    let merged = merge_reports(&named)?;
    fs::create_dir_all(out.join("curves")).map_err(io_err(out))?;
    write_file(&out.join("comparison.csv"), &merged)?;
    for dir in runs {
        let log = dir.join("metrics.log");
        let text = fs::read_to_string(&log).map_err(|e| CliError::Domain(format!("missing log {}: {e}", log.display())))?;
        let mut body = String::from("step,train_loss,validation_score\n");
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            body.push_str(line);
            body.push('\n');
        }
        write_file(&out.join("curves").join(format!("{}.csv", run_name(dir))), &body)?;
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    RunManifest {
        subcommand: "report".into(),
        config_path: None,
        options: options(&[(
            "runs",
            a.runs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(" "),
        )]),
        output: a.out.clone(),
    }
    .write(true)?;
    report_tables(&a.runs, &a.out)
}

fn configure_threads() -> Result<(), String> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?,
        Err(_) => 1,
    };
    // the global pool can only be configured once per process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code:
/// 0 success, 1 domain error, 2 usage error.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return 2;
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
