//! Two-phase training: reflectivity pre-training, parameter transfer,
//! fine-tuning for nowcasting or estimation, checkpoint selection and evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{TapeError, Var};
use crate::baselines::{persistence_nowcast, zr_hourly_estimate, BaselineError, ZrParams};
use crate::dataset::{
    assemble_estimation_input, assemble_nowcast_input, nowcast_input, precip_class, DataError, DataStore,
    PrecipClass, SampleSet, FRAMES, LEADS, LEAD_STEP_MIN,
};
use crate::losses::{
    class_loss_node, emd_node, emd_pixel, pixel_probs, sse_node, ClassLoss, LossError, PixelClass, PixelValue,
    DEFAULT_GAMMA,
};
use crate::metrics::{
    csi_score, hard_classify, lead_matrices, mse, CaseRecord, ConfusionMatrix, EvalReport, MetricError,
};
use crate::model::{dim_plan, unet_forward, DimPlan, Mode, ModelConfig, ModelError, Param, ParamKind, ParamSet, FINAL_LAYER};
use crate::dataset::Event;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const DEFAULT_LEARNING_RATE: f64 = 2e-5;
pub const DEFAULT_VALIDATION_INTERVAL: usize = 1000;
pub const PRETRAIN_STEPS: usize = 50_000;
pub const PRETRAIN_BATCH: usize = 20;
pub const FINETUNE_STEPS: usize = 35_000;
pub const FINETUNE_BATCH: usize = 24;

/// Samples per evaluation forward pass (evaluation-mode outputs do not depend on it).
const EVAL_BATCH: usize = 8;
/// Mixed into the seed when drawing a re-initialised final layer.
const FINAL_LAYER_SEED_SALT: u64 = 0x5EED_F1A1;

const CKPT_MAGIC: [u8; 4] = *b"NKC1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("shape mismatch for {name}: {detail}")]
    Shape { name: String, detail: String },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// What the network predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// Classes 1–6 hours ahead from seven frames plus a target-time encoding.
    Nowcast,
    /// Hourly accumulation ending at the newest frame.
    Estimation,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Nowcast => "nowcast",
            Task::Estimation => "estimation",
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            Task::Nowcast => FRAMES + LEADS,
            Task::Estimation => FRAMES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainPhase {
    /// Reflectivity prediction; the task selects the target times.
    Pretrain(Task),
    FinetuneNowcast,
    FinetuneEstimation,
}

impl TrainPhase {
    pub fn task(self) -> Task {
        match self {
            TrainPhase::Pretrain(t) => t,
            TrainPhase::FinetuneNowcast => Task::Nowcast,
            TrainPhase::FinetuneEstimation => Task::Estimation,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainPhase::Pretrain(Task::Nowcast) => "pretrain-nowcast",
            TrainPhase::Pretrain(Task::Estimation) => "pretrain-estimation",
            TrainPhase::FinetuneNowcast => "finetune-nowcast",
            TrainPhase::FinetuneEstimation => "finetune-estimation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            TrainPhase::Pretrain(Task::Nowcast),
            TrainPhase::Pretrain(Task::Estimation),
            TrainPhase::FinetuneNowcast,
            TrainPhase::FinetuneEstimation,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }

    /// Direction in which the validation score improves.
    pub fn objective(self) -> Objective {
        match self {
            TrainPhase::FinetuneNowcast => Objective::Maximize,
            _ => Objective::Minimize,
        }
    }
}

impl fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub phase: TrainPhase,
    /// Used by nowcast fine-tuning only.
    pub loss: ClassLoss,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_interval: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Published step counts, batch sizes, learning rate and validation interval.
    pub fn defaults(phase: TrainPhase, model: ModelConfig) -> Self {
        let (steps, batch_size) = match phase {
            TrainPhase::Pretrain(_) => (PRETRAIN_STEPS, PRETRAIN_BATCH),
            _ => (FINETUNE_STEPS, FINETUNE_BATCH),
        };
        Self {
            phase,
            loss: ClassLoss::Csi,
            steps,
            batch_size,
            learning_rate: DEFAULT_LEARNING_RATE,
            validation_interval: DEFAULT_VALIDATION_INTERVAL,
            seed: 0,
            model,
        }
    }

    pub fn validate(&self) -> Result<DimPlan, TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.validation_interval == 0 {
            return bad("validation_interval must be positive".into());
        }
        if let ClassLoss::Focal { gamma } = self.loss {
            if !(gamma >= 0.0 && gamma.is_finite()) {
                return bad(format!("gamma must be non-negative, got {gamma}"));
            }
        }
        let task = self.phase.task();
        if self.model.in_channels != task.in_channels() {
            return bad(format!(
                "{} models take {} input channels, got {}",
                task.name(),
                task.in_channels(),
                self.model.in_channels
            ));
        }
        let want_out = match self.phase {
            TrainPhase::Pretrain(_) => None,
            TrainPhase::FinetuneNowcast => Some(3),
            TrainPhase::FinetuneEstimation => Some(1),
        };
        match want_out {
            Some(o) if self.model.out_channels != o => {
                return bad(format!("{} needs {o} output channels, got {}", self.phase, self.model.out_channels))
            }
            None if self.model.out_channels < 2 => {
                return bad("pre-training needs one output channel per reflectivity bin".into())
            }
            _ => {}
        }
        Ok(dim_plan(&self.model)?)
    }
}

/// Adam moments for every parameter position (`None` for running buffers).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || {
            params
                .params()
                .iter()
                .map(|p| p.kind.trainable().then(|| Tensor::zeros(p.value.shape())))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(params: &mut ParamSet, grads: &[Option<Tensor>], state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Shape {
            name: "<all>".into(),
            detail: format!("{} parameters, {} gradients, {} moments", params.len(), grads.len(), state.m.len()),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        let p = &params.params()[i];
        let ok = match (g, &state.m[i]) {
            (Some(g), Some(m)) => g.shape() == p.value.shape() && m.shape() == p.value.shape(),
            (None, _) => true,
            (Some(_), None) => false,
        };
        if !ok {
            return Err(TrainError::Shape {
                name: p.name.clone(),
                detail: format!("parameter {:?}", p.value.shape()),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let m = state.m[i].as_mut().expect("checked above").data_mut();
        let v = state.v[i].as_mut().expect("checked above").data_mut();
        let w = params.value_mut(i).data_mut();
        for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Minimize,
    Maximize,
}

/// Index of the best score; the earliest wins ties. NaN scores are never selected.
pub fn select_best(scores: &[f64], objective: Objective) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => match objective {
                Objective::Minimize => s < scores[b],
                Objective::Maximize => s > scores[b],
            },
        };
        if better {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub model: ModelConfig,
    pub phase: TrainPhase,
    pub loss: ClassLoss,
    pub step: usize,
    pub validation_score: f64,
    /// Validation score of the parameters before the first update.
    pub initial_validation: f64,
    pub seed: u64,
}

fn loss_text(loss: ClassLoss) -> String {
    match loss {
        ClassLoss::Focal { gamma } => format!("focal:{gamma:?}"),
        other => other.name().to_string(),
    }
}

/// Parses `csi`, `ce`, `focal` (γ = 2) or `focal:<γ>`.
pub fn parse_loss(s: &str) -> Option<ClassLoss> {
    match s {
        "csi" => Some(ClassLoss::Csi),
        "ce" => Some(ClassLoss::CrossEntropy),
        "focal" => Some(ClassLoss::Focal { gamma: DEFAULT_GAMMA }),
        _ => {
            let gamma: f64 = s.strip_prefix("focal:")?.parse().ok()?;
            (gamma >= 0.0).then_some(ClassLoss::Focal { gamma })
        }
    }
}

impl Checkpoint {
    /// `key=value` sidecar text.
    pub fn meta_text(&self) -> String {
        let m = &self.model;
        format!(
            "phase={}\nloss={}\nstep={}\nvalidation_score={:?}\ninitial_validation={:?}\nseed={}\n\
             depth={}\nbase_channels={}\nin_channels={}\nout_channels={}\ninput_hw={}\n",
            self.phase,
            loss_text(self.loss),
            self.step,
            self.validation_score,
            self.initial_validation,
            self.seed,
            m.depth,
            m.base_channels,
            m.in_channels,
            m.out_channels,
            m.input_hw
        )
    }

    /// Sidecar path: the checkpoint path with extension `meta`.
    pub fn meta_path(path: &Path) -> PathBuf {
        path.with_extension("meta")
    }

    /// Writes the tensors to `path` and the metadata next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let mut out = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.params() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(kind_code(p.kind));
            for d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out)?;
        fs::write(Self::meta_path(path), self.meta_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let err = |reason: String| TrainError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let bytes = fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4).ok_or_else(|| err("truncated".into()))? != CKPT_MAGIC {
            return Err(err("bad magic".into()));
        }
        let n = r.u32().ok_or_else(|| err("truncated".into()))?;
        let mut params = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let p = r.param().ok_or_else(|| err("truncated or malformed tensor".into()))?;
            params.push(p);
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes".into()));
        }
        let params = ParamSet::from_params(params)?;

        let meta_path = Self::meta_path(path);
        let text = fs::read_to_string(&meta_path)?;
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("malformed metadata line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| err(format!("metadata missing {k}")));
        fn num<T: std::str::FromStr>(v: &str, k: &str, err: &dyn Fn(String) -> TrainError) -> Result<T, TrainError> {
            v.parse().map_err(|_| err(format!("bad {k} value {v:?}")))
        }
        let model = ModelConfig {
            depth: num(get("depth")?, "depth", &err)?,
            base_channels: num(get("base_channels")?, "base_channels", &err)?,
            in_channels: num(get("in_channels")?, "in_channels", &err)?,
            out_channels: num(get("out_channels")?, "out_channels", &err)?,
            input_hw: num(get("input_hw")?, "input_hw", &err)?,
        };
        params.check_against(&model)?;
        let phase = TrainPhase::parse(get("phase")?).ok_or_else(|| err("unknown phase".into()))?;
        let loss = parse_loss(get("loss")?).ok_or_else(|| err("unknown loss".into()))?;
        Ok(Self {
            params,
            model,
            phase,
            loss,
            step: num(get("step")?, "step", &err)?,
            validation_score: num(get("validation_score")?, "validation_score", &err)?,
            initial_validation: num(get("initial_validation")?, "initial_validation", &err)?,
            seed: num(get("seed")?, "seed", &err)?,
        })
    }
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Gamma => 1,
        ParamKind::Beta => 2,
        ParamKind::RunningMean => 3,
        ParamKind::RunningVar => 4,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn param(&mut self) -> Option<Param> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).ok()?;
        let kind = match self.take(1)?[0] {
            0 => ParamKind::Weight,
            1 => ParamKind::Gamma,
            2 => ParamKind::Beta,
            3 => ParamKind::RunningMean,
            4 => ParamKind::RunningVar,
            _ => return None,
        };
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = self.u32()? as usize;
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        let raw = self.take(count.checked_mul(8)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Some(Param {
            name,
            kind,
            value: Tensor::from_vec(shape, data),
        })
    }
}

/// Copies every pre-trained tensor into a `target`-shaped parameter set; the
/// final layer is re-initialised when its shape differs.
pub fn transfer_params(pretrained: &Checkpoint, target: &ModelConfig, seed: u64) -> Result<ParamSet, TrainError> {
    let fresh = ParamSet::init(target, seed ^ FINAL_LAYER_SEED_SALT)?;
    if fresh.len() != pretrained.params.len() {
        return Err(TrainError::Shape {
            name: "<all>".into(),
            detail: format!(
                "target has {} tensors, checkpoint has {}",
                fresh.len(),
                pretrained.params.len()
            ),
        });
    }
    let mut out = Vec::with_capacity(fresh.len());
    for p in fresh.params() {
        let src = pretrained.params.get(&p.name).ok_or_else(|| TrainError::Shape {
            name: p.name.clone(),
            detail: "missing from checkpoint".into(),
        })?;
        let value = if src.shape() == p.value.shape() {
            src.clone()
        } else if p.name == FINAL_LAYER {
            p.value.clone()
        } else {
            return Err(TrainError::Shape {
                name: p.name.clone(),
                detail: format!("checkpoint {:?}, target {:?}", src.shape(), p.value.shape()),
            });
        };
        out.push(Param {
            name: p.name.clone(),
            kind: p.kind,
            value,
        });
    }
    Ok(ParamSet::from_params(out)?)
}

/// One recorded validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationPoint {
    pub step: usize,
    /// Mean training loss since the previous validation.
    pub train_loss: f64,
    pub score: f64,
}

impl ValidationPoint {
    /// `step,train_loss,score` line for `metrics.log`.
    pub fn log_line(&self) -> String {
        format!("{},{:?},{:?}", self.step, self.train_loss, self.score)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub series: Vec<ValidationPoint>,
}

/// A training or validation example: an anchor time and a target index (1–6;
/// 0 for estimation, which targets the anchor itself).
type Example = (i64, usize);

struct Geometry {
    offset: usize,
    out: usize,
}

enum Batch {
    Reflectivity { input: Tensor, truth: Tensor },
    Classes { input: Tensor, labels: Vec<PixelClass> },
    Values { input: Tensor, targets: Vec<PixelValue> },
}

impl Batch {
    fn input(&self) -> &Tensor {
        match self {
            Batch::Reflectivity { input, .. } | Batch::Classes { input, .. } | Batch::Values { input, .. } => input,
        }
    }
}

fn check_store(store: &DataStore, plan: &DimPlan) -> Result<Geometry, TrainError> {
    let g = store.geometry();
    if g.height != plan.input_hw || g.width != plan.input_hw {
        return Err(TrainError::Config(format!(
            "model input {0}x{0} does not match {1}x{2} grids",
            plan.input_hw, g.height, g.width
        )));
    }
    store.check_patch(plan.offset, plan.output_hw)?;
    Ok(Geometry {
        offset: plan.offset,
        out: plan.output_hw,
    })
}

fn examples(set: &SampleSet, task: Task) -> Vec<Example> {
    match task {
        Task::Nowcast => set
            .anchors
            .iter()
            .flat_map(|&t| (1..=LEADS).map(move |k| (t, k)))
            .collect(),
        Task::Estimation => set.anchors.iter().map(|&t| (t, 0)).collect(),
    }
}

fn window(store: &DataStore, t: i64) -> Result<Vec<std::sync::Arc<crate::grid::RadarGrid>>, TrainError> {
    store
        .frame_window(t)
        .ok_or_else(|| TrainError::EmptyDataset(format!("no complete frame window at {t}")))
}

fn assemble(store: &DataStore, phase: TrainPhase, geo: &Geometry, batch: &[Example]) -> Result<Batch, TrainError> {
    let mut inputs = Vec::with_capacity(batch.len());
    match phase {
        TrainPhase::Pretrain(task) => {
            let mut truths = Vec::with_capacity(batch.len());
            for &(t, k) in batch {
                let frames = window(store, t)?;
                let target_time = t + k as i64 * LEAD_STEP_MIN;
                let target = store
                    .grid(target_time)
                    .ok_or_else(|| TrainError::EmptyDataset(format!("no target frame at {target_time}")))?;
                inputs.push(match task {
                    Task::Nowcast => nowcast_input(&frames, k)?,
                    Task::Estimation => assemble_estimation_input(&crate::dataset::EstimationSample {
                        frames,
                        targets: Vec::new(),
                    })?,
                });
                let (h, w) = (target.height(), target.width());
                let full = Tensor::from_vec([1, 1, h, w], target.values().iter().map(|&v| v as f64).collect());
                truths.push(full.crop(geo.offset, geo.offset, geo.out, geo.out));
            }
            Ok(Batch::Reflectivity {
                input: Tensor::stack(&inputs),
                truth: Tensor::stack(&truths),
            })
        }
        TrainPhase::FinetuneNowcast => {
            let mut labels = Vec::new();
            for (item, &(t, k)) in batch.iter().enumerate() {
                let sample = store
                    .nowcast_sample(t, k)
                    .ok_or_else(|| TrainError::EmptyDataset(format!("no sample at {t}")))?;
                inputs.push(assemble_nowcast_input(&sample)?);
                labels.extend(sample.labels.iter().map(|l| PixelClass {
                    item,
                    row: l.row - geo.offset,
                    col: l.col - geo.offset,
                    class: l.class,
                }));
            }
            Ok(Batch::Classes {
                input: Tensor::stack(&inputs),
                labels,
            })
        }
        TrainPhase::FinetuneEstimation => {
            let mut targets = Vec::new();
            for (item, &(t, _)) in batch.iter().enumerate() {
                let sample = store
                    .estimation_sample(t)
                    .ok_or_else(|| TrainError::EmptyDataset(format!("no sample at {t}")))?;
                inputs.push(assemble_estimation_input(&sample)?);
                targets.extend(sample.targets.iter().map(|s| PixelValue {
                    item,
                    row: s.row - geo.offset,
                    col: s.col - geo.offset,
                    value: s.accum_mm,
                }));
            }
            Ok(Batch::Values {
                input: Tensor::stack(&inputs),
                targets,
            })
        }
    }
}

/// Forward, loss, backward and one Adam update; returns the loss value.
fn train_step(
    config: &TrainConfig,
    params: &mut ParamSet,
    adam: &mut AdamState,
    batch: &Batch,
) -> Result<f64, TrainError> {
    let mut fwd = unet_forward(&config.model, params, batch.input(), Mode::Train)?;
    let loss: Var = match batch {
        Batch::Reflectivity { truth, .. } => {
            let probs = fwd.tape.softmax_channels(fwd.logits);
            emd_node(&mut fwd.tape, probs, truth)?
        }
        Batch::Classes { labels, .. } => {
            let probs = fwd.tape.softmax_channels(fwd.logits);
            class_loss_node(&mut fwd.tape, probs, labels, config.loss)?
        }
        Batch::Values { targets, .. } => sse_node(&mut fwd.tape, fwd.logits, targets)?,
    };
    let value = fwd.tape.value(loss).item();
    let mut grads = fwd.tape.backward(loss)?;
    let pg = fwd.param_grads(&mut grads);
    adam_step(params, &pg, adam, config.learning_rate)?;
    params.apply_bn_updates(&fwd.bn_updates);
    Ok(value)
}

/// Evaluation-mode network output for a batch, softmax-normalised when `probabilities`.
pub fn predict(model: &ModelConfig, params: &ParamSet, input: &Tensor, probabilities: bool) -> Result<Tensor, TrainError> {
    let mut fwd = unet_forward(model, params, input, Mode::Eval)?;
    let out = if probabilities {
        fwd.tape.softmax_channels(fwd.logits)
    } else {
        fwd.logits
    };
    Ok(fwd.tape.value(out).clone())
}

/// Mean per-pixel EMD over every non-missing output-patch pixel of the examples.
fn validation_emd(
    model: &ModelConfig,
    params: &ParamSet,
    store: &DataStore,
    phase: TrainPhase,
    geo: &Geometry,
    examples: &[Example],
) -> Result<f64, TrainError> {
    let (mut total, mut count) = (0.0, 0usize);
    let mut pix = vec![0.0; model.out_channels];
    for chunk in examples.chunks(EVAL_BATCH) {
        let Batch::Reflectivity { input, truth } = assemble(store, phase, geo, chunk)? else {
            unreachable!("pre-training batches carry reflectivity targets")
        };
        let probs = predict(model, params, &input, true)?;
        let plane = geo.out * geo.out;
        for b in 0..chunk.len() {
            let pv = probs.item_slice(b);
            for (i, &t) in truth.channel(b, 0).iter().enumerate() {
                if t.is_nan() {
                    continue;
                }
                for (r, slot) in pix.iter_mut().enumerate() {
                    *slot = pv[r * plane + i];
                }
                total += emd_pixel(&pix, t)?;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(TrainError::EmptyDataset("no valid validation pixels".into()));
    }
    Ok(total / count as f64)
}

/// Per-lead confusion matrices and case records for a nowcast model.
#[derive(Debug, Clone, PartialEq)]
pub struct NowcastEval {
    pub matrices: Vec<ConfusionMatrix>,
    pub report: EvalReport,
    pub records: Vec<CaseRecord>,
}

impl NowcastEval {
    fn from_records(records: Vec<CaseRecord>) -> Self {
        let mut matrices = lead_matrices();
        for r in &records {
            matrices[r.lead_index].add(r.predicted, r.actual);
        }
        let report = EvalReport::from_matrices(&matrices);
        Self {
            matrices,
            report,
            records,
        }
    }

    /// All leads pooled into one matrix.
    pub fn overall(&self) -> ConfusionMatrix {
        let mut all = ConfusionMatrix::new(0);
        for m in &self.matrices {
            all.merge(m);
        }
        all
    }
}

fn nowcast_records(
    model: &ModelConfig,
    params: &ParamSet,
    store: &DataStore,
    geo: &Geometry,
    anchors: &[i64],
) -> Result<Vec<CaseRecord>, TrainError> {
    let examples: Vec<Example> = anchors
        .iter()
        .flat_map(|&t| (1..=LEADS).map(move |k| (t, k)))
        .collect();
    let mut records = Vec::new();
    for chunk in examples.chunks(EVAL_BATCH) {
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut samples = Vec::with_capacity(chunk.len());
        for &(t, k) in chunk {
            let s = store
                .nowcast_sample(t, k)
                .ok_or_else(|| TrainError::EmptyDataset(format!("no sample at {t}")))?;
            inputs.push(assemble_nowcast_input(&s)?);
            samples.push(s);
        }
        let probs = predict(model, params, &Tensor::stack(&inputs), true)?;
        for (item, s) in samples.iter().enumerate() {
            for l in &s.labels {
                let p = pixel_probs(&probs, item, l.row - geo.offset, l.col - geo.offset);
                records.push(CaseRecord {
                    station: l.station,
                    lead_index: s.target_index - 1,
                    predicted: hard_classify(p),
                    actual: l.class,
                });
            }
        }
    }
    Ok(records)
}

/// Forward at every lead for every anchor, hard-classified at station pixels.
pub fn evaluate_nowcast(ckpt: &Checkpoint, test: &SampleSet) -> Result<NowcastEval, TrainError> {
    if ckpt.model.out_channels != 3 || ckpt.phase.task() != Task::Nowcast {
        return Err(TrainError::Config(format!("{} checkpoint is not a nowcast classifier", ckpt.phase)));
    }
    let geo = check_store(test.store, &dim_plan(&ckpt.model)?)?;
    let records = nowcast_records(&ckpt.model, &ckpt.params, test.store, &geo, &test.anchors)?;
    Ok(NowcastEval::from_records(records))
}

/// Persistence through the same reporter: each station's class for the hour
/// ending at the anchor is predicted at every lead.
pub fn evaluate_persistence(test: &SampleSet) -> NowcastEval {
    let store = test.store;
    let mut records = Vec::new();
    for &t in &test.anchors {
        let stations: Vec<usize> = (0..store.stations().len())
            .filter(|&s| store.current_class(s, t).is_some())
            .collect();
        let current: Vec<PrecipClass> = stations.iter().map(|&s| store.current_class(s, t).unwrap()).collect();
        let forecasts = persistence_nowcast(&current);
        for (&s, f) in stations.iter().zip(&forecasts) {
            for (lead_index, &predicted) in f.iter().enumerate() {
                if let Some(actual) = store.current_class(s, t + (lead_index as i64 + 1) * LEAD_STEP_MIN) {
                    records.push(CaseRecord {
                        station: s,
                        lead_index,
                        predicted,
                        actual,
                    });
                }
            }
        }
    }
    NowcastEval::from_records(records)
}

/// Subset of station-time pairs, selected by ground-truth class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassFilter {
    All,
    Light,
    Heavy,
}

impl ClassFilter {
    pub const ALL: [ClassFilter; 3] = [ClassFilter::All, ClassFilter::Light, ClassFilter::Heavy];

    pub fn name(self) -> &'static str {
        match self {
            ClassFilter::All => "all",
            ClassFilter::Light => "light",
            ClassFilter::Heavy => "heavy",
        }
    }

    fn keeps(self, truth_mm: f64) -> bool {
        match (self, precip_class(truth_mm)) {
            (ClassFilter::All, _) => true,
            (ClassFilter::Light, Ok(c)) => c == PrecipClass::Light,
            (ClassFilter::Heavy, Ok(c)) => c == PrecipClass::Heavy,
            _ => false,
        }
    }
}

/// One estimated accumulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatePair {
    pub timestamp: i64,
    pub station: usize,
    pub predicted: f64,
    pub truth: f64,
}

/// Mean over timestamps of per-timestamp MSE among pairs kept by the filter;
/// `None` when the filter keeps nothing.
pub fn estimation_mse(pairs: &[EstimatePair], filter: ClassFilter) -> Option<f64> {
    let mut groups: BTreeMap<i64, Vec<(f64, f64)>> = BTreeMap::new();
    for p in pairs.iter().filter(|p| filter.keeps(p.truth)) {
        groups.entry(p.timestamp).or_default().push((p.predicted, p.truth));
    }
    let groups: Vec<_> = groups.into_values().collect();
    mse(&groups).ok()
}

fn estimation_pairs_model(
    model: &ModelConfig,
    params: &ParamSet,
    store: &DataStore,
    geo: &Geometry,
    anchors: &[i64],
) -> Result<Vec<EstimatePair>, TrainError> {
    let mut pairs = Vec::new();
    for chunk in anchors.chunks(EVAL_BATCH) {
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut samples = Vec::with_capacity(chunk.len());
        for &t in chunk {
            let s = store
                .estimation_sample(t)
                .ok_or_else(|| TrainError::EmptyDataset(format!("no sample at {t}")))?;
            inputs.push(assemble_estimation_input(&s)?);
            samples.push((t, s));
        }
        let out = predict(model, params, &Tensor::stack(&inputs), false)?;
        for (item, (t, s)) in samples.iter().enumerate() {
            for target in &s.targets {
                pairs.push(EstimatePair {
                    timestamp: *t,
                    station: target.station,
                    predicted: out[[item, 0, target.row - geo.offset, target.col - geo.offset]],
                    truth: target.accum_mm,
                });
            }
        }
    }
    Ok(pairs)
}

/// Model accumulations at every station with an observation for the hour ending at each anchor.
pub fn estimate_with_model(ckpt: &Checkpoint, test: &SampleSet) -> Result<Vec<EstimatePair>, TrainError> {
    if ckpt.model.out_channels != 1 || ckpt.phase.task() != Task::Estimation {
        return Err(TrainError::Config(format!("{} checkpoint is not an estimator", ckpt.phase)));
    }
    let geo = check_store(test.store, &dim_plan(&ckpt.model)?)?;
    estimation_pairs_model(&ckpt.model, &ckpt.params, test.store, &geo, &test.anchors)
}

/// Z-R accumulations on the same station-time pairs as [`estimate_with_model`].
pub fn estimate_with_zr(params: ZrParams, test: &SampleSet) -> Result<Vec<EstimatePair>, TrainError> {
    let mut pairs = Vec::new();
    for &t in &test.anchors {
        let s = test
            .store
            .estimation_sample(t)
            .ok_or_else(|| TrainError::EmptyDataset(format!("no sample at {t}")))?;
        for target in &s.targets {
            let e = zr_hourly_estimate(&s.frames, params, (target.row, target.col))?;
            pairs.push(EstimatePair {
                timestamp: t,
                station: target.station,
                predicted: e.accum_mm,
                truth: target.accum_mm,
            });
        }
    }
    Ok(pairs)
}

/// MSE of a trained estimator restricted by `filter`; `None` when undefined.
pub fn evaluate_estimation(ckpt: &Checkpoint, test: &SampleSet, filter: ClassFilter) -> Result<Option<f64>, TrainError> {
    Ok(estimation_mse(&estimate_with_model(ckpt, test)?, filter))
}

/// Mean EMD of a pre-trained reflectivity model over every (anchor, target) pair.
pub fn evaluate_pretrain(ckpt: &Checkpoint, test: &SampleSet) -> Result<f64, TrainError> {
    if !matches!(ckpt.phase, TrainPhase::Pretrain(_)) {
        return Err(TrainError::Config(format!("{} checkpoint is not a reflectivity model", ckpt.phase)));
    }
    let geo = check_store(test.store, &dim_plan(&ckpt.model)?)?;
    let examples = examples(test, ckpt.phase.task());
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset("no usable samples".into()));
    }
    validation_emd(&ckpt.model, &ckpt.params, test.store, ckpt.phase, &geo, &examples)
}

/// `filter,mse` table; undefined cells print as `undefined`.
pub fn estimation_csv(pairs: &[EstimatePair]) -> String {
    let mut out = String::from("filter,mse\n");
    for f in ClassFilter::ALL {
        match estimation_mse(pairs, f) {
            Some(v) => out.push_str(&format!("{},{v:.6}\n", f.name())),
            None => out.push_str(&format!("{},undefined\n", f.name())),
        }
    }
    out
}

fn validation_score(
    config: &TrainConfig,
    params: &ParamSet,
    val: &SampleSet,
    geo: &Geometry,
    val_examples: &[Example],
) -> Result<f64, TrainError> {
    match config.phase {
        TrainPhase::Pretrain(_) => validation_emd(&config.model, params, val.store, config.phase, geo, val_examples),
        TrainPhase::FinetuneNowcast => {
            let records = nowcast_records(&config.model, params, val.store, geo, &val.anchors)?;
            Ok(csi_score(&NowcastEval::from_records(records).overall(), Event::Heavy))
        }
        TrainPhase::FinetuneEstimation => {
            let pairs = estimation_pairs_model(&config.model, params, val.store, geo, &val.anchors)?;
            estimation_mse(&pairs, ClassFilter::All)
                .ok_or_else(|| TrainError::EmptyDataset("no validation observations".into()))
        }
    }
}

/// Shared loop: uniform sampling with replacement over (anchor, target) pairs,
/// periodic validation, best-checkpoint selection.
fn run(
    config: &TrainConfig,
    init: ParamSet,
    train: &SampleSet,
    val: &SampleSet,
    observer: &mut dyn FnMut(&ValidationPoint),
) -> Result<TrainOutcome, TrainError> {
    let plan = config.validate()?;
    init.check_against(&config.model)?;
    let geo = check_store(train.store, &plan)?;
    check_store(val.store, &plan)?;
    let task = config.phase.task();
    let train_examples = examples(train, task);
    let val_examples = examples(val, task);
    if train_examples.is_empty() {
        return Err(TrainError::EmptyDataset("training set has no usable samples".into()));
    }
    if val_examples.is_empty() {
        return Err(TrainError::EmptyDataset("validation set has no usable samples".into()));
    }

    let mut params = init;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let objective = config.phase.objective();
    let initial_validation = validation_score(config, &params, val, &geo, &val_examples)?;

    let mut series = Vec::new();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for step in 1..=config.steps {
        let picks: Vec<Example> = (0..config.batch_size)
            .map(|_| train_examples[rng.gen_range(0..train_examples.len())])
            .collect();
        let batch = assemble(train.store, config.phase, &geo, &picks)?;
        loss_sum += train_step(config, &mut params, &mut adam, &batch)?;
        loss_n += 1;
        if step % config.validation_interval == 0 || step == config.steps {
            let score = validation_score(config, &params, val, &geo, &val_examples)?;
            let point = ValidationPoint {
                step,
                train_loss: loss_sum / loss_n as f64,
                score,
            };
            (loss_sum, loss_n) = (0.0, 0);
            observer(&point);
            series.push(point);
            let improved = match &best {
                None => !score.is_nan(),
                Some((_, b, _)) => match objective {
                    Objective::Minimize => score < *b,
                    Objective::Maximize => score > *b,
                },
            };
            if improved {
                best = Some((step, score, params.clone()));
            }
        }
    }
    let (step, score, best_params) =
        best.ok_or_else(|| TrainError::Config("every validation score was NaN".into()))?;
    Ok(TrainOutcome {
        best: Checkpoint {
            params: best_params,
            model: config.model,
            phase: config.phase,
            loss: config.loss,
            step,
            validation_score: score,
            initial_validation,
            seed: config.seed,
        },
        series,
    })
}

/// Reflectivity pre-training with the EMD loss; keeps the minimum-validation-EMD parameters.
pub fn pretrain(
    config: &TrainConfig,
    train: &SampleSet,
    val: &SampleSet,
    observer: &mut dyn FnMut(&ValidationPoint),
) -> Result<TrainOutcome, TrainError> {
    if !matches!(config.phase, TrainPhase::Pretrain(_)) {
        return Err(TrainError::Config(format!("pretrain called with phase {}", config.phase)));
    }
    let init = ParamSet::init(&config.model, config.seed)?;
    run(config, init, train, val, observer)
}

fn init_or_fresh(config: &TrainConfig, init: Option<&Checkpoint>) -> Result<ParamSet, TrainError> {
    match init {
        Some(ckpt) => transfer_params(ckpt, &config.model, config.seed),
        None => Ok(ParamSet::init(&config.model, config.seed)?),
    }
}

/// Nowcast fine-tuning from a pre-trained checkpoint (or from scratch when
/// `init` is `None`); keeps the parameters with maximal overall HEAVY CSI.
pub fn finetune_nowcast(
    config: &TrainConfig,
    init: Option<&Checkpoint>,
    train: &SampleSet,
    val: &SampleSet,
    observer: &mut dyn FnMut(&ValidationPoint),
) -> Result<TrainOutcome, TrainError> {
    if config.phase != TrainPhase::FinetuneNowcast {
        return Err(TrainError::Config(format!("finetune_nowcast called with phase {}", config.phase)));
    }
    config.validate()?;
    let params = init_or_fresh(config, init)?;
    run(config, params, train, val, observer)
}

/// Estimation fine-tuning with the SSE loss; keeps the minimum-validation-MSE parameters.
pub fn finetune_estimation(
    config: &TrainConfig,
    init: Option<&Checkpoint>,
    train: &SampleSet,
    val: &SampleSet,
    observer: &mut dyn FnMut(&ValidationPoint),
) -> Result<TrainOutcome, TrainError> {
    if config.phase != TrainPhase::FinetuneEstimation {
        return Err(TrainError::Config(format!("finetune_estimation called with phase {}", config.phase)));
    }
    config.validate()?;
    let params = init_or_fresh(config, init)?;
    run(config, params, train, val, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Phase;
    use crate::dataset::Split;
    use crate::synth::{gen_imbalanced_set, SynthPlan, SynthScenario};

    fn tiny_params() -> ParamSet {
        let cfg = ModelConfig {
            depth: 0,
            base_channels: 2,
            in_channels: 1,
            out_channels: 3,
            input_hw: 10,
        };
        ParamSet::init(&cfg, 1).unwrap()
    }

    fn grads_like(params: &ParamSet, value: f64) -> Vec<Option<Tensor>> {
        params
            .params()
            .iter()
            .map(|p| p.kind.trainable().then(|| Tensor::filled(p.value.shape(), value)))
            .collect()
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &grads_like(&before, 0.0), &mut s, 1e-3).unwrap();
        assert!(p.bit_eq(&before));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_and_constant_steps_move_by_lr() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let g = grads_like(&before, 0.37);
        adam_step(&mut p, &g, &mut s, 1e-3).unwrap();
        let w0 = before.params()[0].value.data()[0];
        let w1 = p.params()[0].value.data()[0];
        assert!(((w0 - w1) - 1e-3).abs() < 1e-9);
        adam_step(&mut p, &g, &mut s, 1e-3).unwrap();
        let w2 = p.params()[0].value.data()[0];
        assert!(((w1 - w2) - 1e-3).abs() < 1e-9);
        // running buffers are not touched
        let rv = p.position("bottleneck.conv1.bn.running_var").unwrap();
        assert!(p.params()[rv].value.bit_eq(&before.params()[rv].value));
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = tiny_params();
        let mut s = AdamState::new(&p);
        let mut g = grads_like(&p, 1.0);
        g[0] = Some(Tensor::zeros([1, 1, 1, 1]));
        assert!(matches!(adam_step(&mut p, &g, &mut s, 1e-3), Err(TrainError::Shape { .. })));
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_best(&[5.0, 3.0, 4.0], Objective::Minimize), Some(1));
        assert_eq!(select_best(&[0.2, 0.5, 0.4], Objective::Maximize), Some(1));
        assert_eq!(select_best(&[2.0, 1.5, 1.7], Objective::Minimize), Some(1));
        assert_eq!(select_best(&[0.9, 0.1, 0.1], Objective::Maximize), Some(0));
        assert_eq!(select_best(&[], Objective::Minimize), None);
    }

    #[test]
    fn paper_defaults() {
        let m = ModelConfig::reference(13, 100);
        let p = TrainConfig::defaults(TrainPhase::Pretrain(Task::Nowcast), m);
        assert_eq!((p.steps, p.batch_size), (50_000, 20));
        let f = TrainConfig::defaults(TrainPhase::FinetuneNowcast, m);
        assert_eq!((f.steps, f.batch_size, f.validation_interval), (35_000, 24, 1000));
        assert_eq!(f.learning_rate, 2e-5);
    }

    #[test]
    fn loss_names_round_trip() {
        for l in [ClassLoss::Csi, ClassLoss::CrossEntropy, ClassLoss::Focal { gamma: 1.5 }] {
            assert_eq!(parse_loss(&loss_text(l)), Some(l));
        }
        assert_eq!(parse_loss("focal"), Some(ClassLoss::Focal { gamma: 2.0 }));
        assert_eq!(parse_loss("mse"), None);
    }

    fn small_model(out: usize, task: Task) -> ModelConfig {
        ModelConfig {
            depth: 1,
            base_channels: 2,
            in_channels: task.in_channels(),
            out_channels: out,
            input_hw: 28,
        }
    }

    fn ckpt(model: ModelConfig, seed: u64) -> Checkpoint {
        Checkpoint {
            params: ParamSet::init(&model, seed).unwrap(),
            model,
            phase: TrainPhase::Pretrain(Task::Nowcast),
            loss: ClassLoss::Csi,
            step: 10,
            validation_score: 1.25,
            initial_validation: 3.5,
            seed,
        }
    }

    #[test]
    fn transfer_reinitialises_only_the_final_layer() {
        let pre = ckpt(small_model(100, Task::Nowcast), 4);
        let target = small_model(3, Task::Nowcast);
        let p = transfer_params(&pre, &target, 9).unwrap();
        for param in p.params() {
            let src = pre.params.get(&param.name).unwrap();
            if param.name == FINAL_LAYER {
                assert_eq!(param.value.shape(), [3, 2, 3, 3]);
            } else {
                assert!(param.value.bit_eq(src), "{}", param.name);
            }
        }
        let same = transfer_params(&pre, &pre.model, 9).unwrap();
        assert!(same.bit_eq(&pre.params));
        let deeper = ModelConfig { depth: 2, input_hw: 44, ..target };
        assert_eq!(dim_plan(&deeper).map(|p| p.input_hw), Ok(44));
        assert!(transfer_params(&pre, &deeper, 9).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let mut c = ckpt(small_model(3, Task::Nowcast), 2);
        c.phase = TrainPhase::FinetuneNowcast;
        c.loss = ClassLoss::Focal { gamma: 0.5 };
        c.validation_score = 0.1 + 0.2;
        c.save(&path).unwrap();
        assert!(dir.path().join("best.meta").exists());
        let back = Checkpoint::load(&path).unwrap();
        assert!(back.params.bit_eq(&c.params));
        assert_eq!(back.validation_score.to_bits(), c.validation_score.to_bits());
        assert_eq!((back.phase, back.loss, back.step, back.seed), (c.phase, c.loss, c.step, c.seed));
        assert_eq!(back.model, c.model);

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(TrainError::Checkpoint { .. })));
    }

    #[test]
    fn config_validation() {
        let m = small_model(3, Task::Nowcast);
        let mut c = TrainConfig::defaults(TrainPhase::FinetuneNowcast, m);
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let e = TrainConfig::defaults(TrainPhase::FinetuneEstimation, small_model(3, Task::Estimation));
        assert!(e.validate().is_err());
    }

    #[test]
    fn estimation_mse_filters() {
        let pairs = [
            EstimatePair { timestamp: 0, station: 0, predicted: 1.0, truth: 1.0 },
            EstimatePair { timestamp: 0, station: 1, predicted: 0.0, truth: 2.0 },
            EstimatePair { timestamp: 10, station: 0, predicted: 0.5, truth: 0.5 },
        ];
        assert_eq!(estimation_mse(&pairs, ClassFilter::All), Some((2.0 + 0.0) / 2.0));
        assert_eq!(estimation_mse(&pairs, ClassFilter::Light), Some(2.0));
        assert_eq!(estimation_mse(&pairs, ClassFilter::Heavy), None);
        let perfect: Vec<_> = pairs.iter().map(|p| EstimatePair { predicted: p.truth, ..*p }).collect();
        assert_eq!(estimation_mse(&perfect, ClassFilter::All), Some(0.0));
        assert!(estimation_csv(&pairs).contains("heavy,undefined"));
    }

    fn toy_data() -> crate::synth::SynthDataset {
        let scenario = SynthScenario {
            height: 28,
            width: 28,
            n_cells: 4,
            sigma_cells: (2.0, 4.0),
            heavy_prevalence: 0.05,
            ..SynthScenario::desk(11)
        };
        let plan = SynthPlan {
            train_sequences: 10,
            val_sequences: 2,
            test_sequences: 2,
            sequence_frames: 48,
            n_stations: 20,
            patch_offset: 9,
            patch_size: 10,
        };
        gen_imbalanced_set(&scenario, &plan).unwrap()
    }

    #[test]
    fn nowcast_training_is_deterministic_and_selects_argmax() {
        let data = toy_data();
        let store = data.store().unwrap();
        let train = SampleSet::new(&store, store.usable_anchors(data.splits.get(Phase::Finetune, Split::Train), true));
        let val = SampleSet::new(&store, store.usable_anchors(data.splits.get(Phase::Finetune, Split::Val), true));
        let model = small_model(3, Task::Nowcast);
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 2,
            learning_rate: 1e-2,
            validation_interval: 2,
            seed: 3,
            loss: ClassLoss::CrossEntropy,
            ..TrainConfig::defaults(TrainPhase::FinetuneNowcast, model)
        };
        let mut logged = Vec::new();
        let a = finetune_nowcast(&cfg, None, &train, &val, &mut |p| logged.push(*p)).unwrap();
        assert_eq!(logged.iter().map(|p| p.step).collect::<Vec<_>>(), vec![2, 4, 6]);
        let scores: Vec<f64> = a.series.iter().map(|p| p.score).collect();
        let i = select_best(&scores, Objective::Maximize).unwrap();
        assert_eq!(a.best.step, a.series[i].step);
        assert_eq!(a.best.validation_score, scores[i]);

        let b = finetune_nowcast(&cfg, None, &train, &val, &mut |_| {}).unwrap();
        assert!(a.best.params.bit_eq(&b.best.params));

        // focal with γ = 0 follows the cross-entropy trajectory exactly
        let focal = TrainConfig { loss: ClassLoss::Focal { gamma: 0.0 }, ..cfg };
        let f = finetune_nowcast(&focal, None, &train, &val, &mut |_| {}).unwrap();
        assert!(a.best.params.bit_eq(&f.best.params));
        assert_eq!(a.series, f.series);

        let test = SampleSet::new(&store, store.usable_anchors(&data.splits.test, true));
        let e = evaluate_nowcast(&a.best, &test).unwrap();
        assert_eq!(e.matrices.len(), 6);
        assert_eq!(e.overall().total() as usize, e.records.len());
    }

    #[test]
    fn pretraining_reduces_emd() {
        let data = toy_data();
        let store = data.store().unwrap();
        let train = SampleSet::new(&store, store.usable_anchors(data.splits.get(Phase::Pretrain, Split::Train), true));
        let val = SampleSet::new(&store, store.usable_anchors(data.splits.get(Phase::Pretrain, Split::Val), true));
        let cfg = TrainConfig {
            steps: 40,
            batch_size: 2,
            learning_rate: 1e-2,
            validation_interval: 20,
            seed: 1,
            ..TrainConfig::defaults(TrainPhase::Pretrain(Task::Nowcast), small_model(100, Task::Nowcast))
        };
        let out = pretrain(&cfg, &train, &val, &mut |_| {}).unwrap();
        assert!(out.best.validation_score < out.best.initial_validation);
    }

    #[test]
    fn estimation_mse_decreases_early() {
        let data = toy_data();
        let store = data.store().unwrap();
        let train = SampleSet::new(&store, store.usable_anchors(data.splits.get(Phase::Finetune, Split::Train), false));
        let val = SampleSet::new(&store, store.usable_anchors(data.splits.get(Phase::Finetune, Split::Val), false));
        let cfg = TrainConfig {
            steps: 8,
            batch_size: 4,
            learning_rate: 1e-2,
            validation_interval: 2,
            seed: 5,
            ..TrainConfig::defaults(TrainPhase::FinetuneEstimation, small_model(1, Task::Estimation))
        };
        let out = finetune_estimation(&cfg, None, &train, &val, &mut |_| {}).unwrap();
        let mut prev = out.best.initial_validation;
        for p in &out.series {
            assert!(p.score < prev, "{:?}", out.series);
            prev = p.score;
        }
        let zr = estimate_with_zr(data.scenario.zr, &val).unwrap();
        assert!(estimation_mse(&zr, ClassFilter::All).unwrap() < 1e-15);
    }

    #[test]
    fn persistence_on_stationary_data_is_perfect() {
        let scenario = SynthScenario {
            height: 24,
            width: 24,
            max_speed: 0.0,
            heavy_prevalence: 0.05,
            ..SynthScenario::desk(2)
        };
        let plan = SynthPlan {
            train_sequences: 1,
            val_sequences: 1,
            test_sequences: 2,
            sequence_frames: 48,
            n_stations: 30,
            patch_offset: 2,
            patch_size: 20,
        };
        let data = gen_imbalanced_set(&scenario, &plan).unwrap();
        let store = data.store().unwrap();
        let all: Vec<i64> = store.timestamps().collect();
        let test = SampleSet::new(&store, store.usable_anchors(&all, true));
        let e = evaluate_persistence(&test);
        assert!(e.overall().binary(Event::Heavy).0 > 0);
        for row in &e.report.rows {
            assert_eq!((row.csi_rain, row.csi_heavy), (1.0, 1.0));
        }
    }
}
