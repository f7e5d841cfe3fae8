//! U-Net with valid convolutions: configuration, dimension planning,
//! parameters and the forward pass.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{BatchStats, BnMode, Grads, Tape, TapeError, Var};
use crate::tensor::Tensor;

/// Full-scale input side length.
pub const REFERENCE_INPUT_HW: usize = 1468;
/// Full-scale output side length.
pub const REFERENCE_OUTPUT_HW: usize = 706;
/// Full-scale output offset: output pixel (i, j) sits over input pixel (i + 381, j + 381).
pub const REFERENCE_OFFSET: usize = 381;
pub const REFERENCE_DEPTH: usize = 7;
pub const REFERENCE_BASE_CHANNELS: usize = 32;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("infeasible configuration at {stage}: {reason}")]
    Infeasible { stage: String, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match configuration (expected [_, {channels}, {hw}, {hw}])")]
    InputShape { got: [usize; 4], channels: usize, hw: usize },
    #[error("parameter {name}: {reason}")]
    Param { name: String, reason: String },
    #[error("at {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: TapeError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of pooling stages.
    pub depth: usize,
    /// Channels after the first convolution block.
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Side length of the square input.
    pub input_hw: usize,
}

impl ModelConfig {
    pub fn reference(in_channels: usize, out_channels: usize) -> Self {
        Self {
            depth: REFERENCE_DEPTH,
            base_channels: REFERENCE_BASE_CHANNELS,
            in_channels,
            out_channels,
            input_hw: REFERENCE_INPUT_HW,
        }
    }

    /// Channel count of contracting stage `s` (the bottleneck is stage `depth`).
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "depth={} base_channels={} in_channels={} out_channels={} input_hw={}",
            self.depth, self.base_channels, self.in_channels, self.out_channels, self.input_hw
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContractingStage {
    pub channels: usize,
    /// Size after the two convolutions (the skip connection source).
    pub conv_hw: usize,
    pub pooled_hw: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpansiveStage {
    pub channels: usize,
    pub up_hw: usize,
    pub skip_hw: usize,
    /// Rows/columns removed from each side of the skip map.
    pub crop: usize,
    pub conv_hw: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimPlan {
    pub input_hw: usize,
    pub contracting: Vec<ContractingStage>,
    pub bottleneck_channels: usize,
    pub bottleneck_hw: usize,
    /// Ordered from the deepest stage upwards.
    pub expansive: Vec<ExpansiveStage>,
    pub output_hw: usize,
    pub out_channels: usize,
    /// Output pixel (i, j) lies over input pixel (i + offset, j + offset).
    pub offset: usize,
}

fn convs(stage: &str, hw: usize, n: usize) -> Result<usize, ModelError> {
    if hw <= 2 * n {
        return Err(ModelError::Infeasible {
            stage: stage.to_string(),
            reason: format!("size {hw} too small for {n} valid 3x3 convolution(s)"),
        });
    }
    Ok(hw - 2 * n)
}

/// Simulates the size recurrence and reports the first infeasible stage.
pub fn dim_plan(config: &ModelConfig) -> Result<DimPlan, ModelError> {
    if config.base_channels == 0 || config.in_channels == 0 || config.out_channels == 0 {
        return Err(ModelError::Config("channel counts must be positive".into()));
    }
    let mut hw = config.input_hw;
    let mut contracting = Vec::with_capacity(config.depth);
    for s in 0..config.depth {
        let conv_hw = convs(&format!("contracting stage {s}"), hw, 2)?;
        if conv_hw % 2 != 0 {
            return Err(ModelError::Infeasible {
                stage: format!("contracting stage {s} pooling"),
                reason: format!("size {conv_hw} is odd"),
            });
        }
        contracting.push(ContractingStage {
            channels: config.stage_channels(s),
            conv_hw,
            pooled_hw: conv_hw / 2,
        });
        hw = conv_hw / 2;
    }
    let bottleneck_hw = convs("bottleneck", hw, 2)?;
    hw = bottleneck_hw;
    let mut expansive = Vec::with_capacity(config.depth);
    for s in (0..config.depth).rev() {
        let up_hw = 2 * hw;
        let skip_hw = contracting[s].conv_hw;
        if skip_hw < up_hw || (skip_hw - up_hw) % 2 != 0 {
            return Err(ModelError::Infeasible {
                stage: format!("expansive stage {s} crop"),
                reason: format!("cannot centre-crop {skip_hw} to {up_hw}"),
            });
        }
        let conv_hw = convs(&format!("expansive stage {s}"), up_hw, 2)?;
        expansive.push(ExpansiveStage {
            channels: config.stage_channels(s),
            up_hw,
            skip_hw,
            crop: (skip_hw - up_hw) / 2,
            conv_hw,
        });
        hw = conv_hw;
    }
    let output_hw = convs("final convolution", hw, 1)?;
    let diff = config.input_hw - output_hw;
    if diff % 2 != 0 {
        return Err(ModelError::Infeasible {
            stage: "output".into(),
            reason: format!("input {} and output {output_hw} differ by an odd amount", config.input_hw),
        });
    }
    Ok(DimPlan {
        input_hw: config.input_hw,
        contracting,
        bottleneck_channels: config.stage_channels(config.depth),
        bottleneck_hw,
        expansive,
        output_hw,
        out_channels: config.out_channels,
        offset: diff / 2,
    })
}

/// Checks a planner result against the full-scale input/output contract.
pub fn satisfies_reference_contract(input_hw: usize, output_hw: usize, offset: usize) -> bool {
    input_hw == REFERENCE_INPUT_HW
        && output_hw == REFERENCE_OUTPUT_HW
        && offset == REFERENCE_OFFSET
        && 2 * offset + output_hw == input_hw
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Gamma | ParamKind::Beta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named model tensors in a fixed order: trainable weights plus BN running buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Name prefixes of every conv+BN layer, in forward order.
fn conv_layers(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let mut layers = Vec::new();
    let mut cin = config.in_channels;
    for s in 0..config.depth {
        let c = config.stage_channels(s);
        layers.push((format!("down{s}.conv1"), cin, c));
        layers.push((format!("down{s}.conv2"), c, c));
        cin = c;
    }
    let cb = config.stage_channels(config.depth);
    layers.push(("bottleneck.conv1".into(), cin, cb));
    layers.push(("bottleneck.conv2".into(), cb, cb));
    for s in (0..config.depth).rev() {
        let c = config.stage_channels(s);
        layers.push((format!("up{s}.conv1"), 2 * c, c));
        layers.push((format!("up{s}.conv2"), c, c));
    }
    layers
}

pub const FINAL_LAYER: &str = "final.weight";

impl ParamSet {
    pub fn from_params(params: Vec<Param>) -> Result<Self, ModelError> {
        let mut index = HashMap::new();
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(ModelError::Param {
                    name: p.name.clone(),
                    reason: "duplicate name".into(),
                });
            }
        }
        Ok(Self { params, index })
    }

    /// Uniform(±1/√fan_in) filters, identity batch normalisation.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        dim_plan(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let uniform = |shape: [usize; 4], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let len = shape.iter().product();
            Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        let layers = conv_layers(config);
        let push_conv = |params: &mut Vec<Param>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
            params.push(Param {
                name: format!("{name}.weight"),
                kind: ParamKind::Weight,
                value: uniform([cout, cin, 3, 3], cin * 9, rng),
            });
            for (suffix, kind, v) in [
                ("gamma", ParamKind::Gamma, 1.0),
                ("beta", ParamKind::Beta, 0.0),
                ("running_mean", ParamKind::RunningMean, 0.0),
                ("running_var", ParamKind::RunningVar, 1.0),
            ] {
                params.push(Param {
                    name: format!("{name}.bn.{suffix}"),
                    kind,
                    value: Tensor::filled([1, cout, 1, 1], v),
                });
            }
        };
        let mut li = layers.iter();
        for _ in 0..config.depth {
            for _ in 0..2 {
                let (name, cin, cout) = li.next().unwrap();
                push_conv(&mut params, name, *cin, *cout, &mut rng);
            }
        }
        for _ in 0..2 {
            let (name, cin, cout) = li.next().unwrap();
            push_conv(&mut params, name, *cin, *cout, &mut rng);
        }
        for s in (0..config.depth).rev() {
            let cin = config.stage_channels(s + 1);
            params.push(Param {
                name: format!("up{s}.upconv.weight"),
                kind: ParamKind::Weight,
                value: uniform([cin, cin / 2, 2, 2], cin, &mut rng),
            });
            for _ in 0..2 {
                let (name, cin, cout) = li.next().unwrap();
                push_conv(&mut params, name, *cin, *cout, &mut rng);
            }
        }
        params.push(Self::final_layer(config, &mut rng));
        Self::from_params(params)
    }

    fn final_layer(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Param {
        let cin = config.base_channels;
        let bound = 1.0 / ((cin * 9) as f64).sqrt();
        let shape = [config.out_channels, cin, 3, 3];
        let len = shape.iter().product();
        Param {
            name: FINAL_LAYER.into(),
            kind: ParamKind::Weight,
            value: Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-bound..bound)).collect()),
        }
    }

    /// A freshly initialised final layer for `config`, drawn from `seed`.
    pub fn fresh_final_layer(config: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::final_layer(config, &mut rng).value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.params[i].value)
    }

    fn require(&self, name: &str) -> Result<usize, ModelError> {
        self.position(name).ok_or_else(|| ModelError::Param {
            name: name.into(),
            reason: "missing".into(),
        })
    }

    pub fn set_value(&mut self, i: usize, value: Tensor) {
        self.params[i].value = value;
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Verifies every tensor has the shape `init` would give for `config`.
    pub fn check_against(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let reference = ParamSet::init(config, 0)?;
        if reference.params.len() != self.params.len() {
            return Err(ModelError::Param {
                name: "<all>".into(),
                reason: format!(
                    "expected {} tensors, found {}",
                    reference.params.len(),
                    self.params.len()
                ),
            });
        }
        for (r, p) in reference.params.iter().zip(&self.params) {
            if r.name != p.name || r.value.shape() != p.value.shape() {
                return Err(ModelError::Param {
                    name: p.name.clone(),
                    reason: format!("expected {} with shape {:?}, found shape {:?}", r.name, r.value.shape(), p.value.shape()),
                });
            }
            if p.value.data().iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Param {
                    name: p.name.clone(),
                    reason: "non-finite value".into(),
                });
            }
        }
        Ok(())
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (slot, batch) in [(u.mean_index, &u.stats.mean), (u.var_index, &u.stats.var)] {
                for (r, b) in self.params[slot].value.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.value.bit_eq(&b.value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean_index: usize,
    pub var_index: usize,
    pub stats: BatchStats,
}

/// A recorded forward pass: the tape, its logits and the parameter leaves.
pub struct Forward {
    pub tape: Tape,
    pub logits: Var,
    /// Leaf for each parameter position (running buffers have none).
    pub param_vars: Vec<Option<Var>>,
    pub bn_updates: Vec<BnUpdate>,
}

impl Forward {
    /// Gradient for every parameter position (zeros where none flows; `None` for buffers).
    pub fn param_grads(&self, grads: &mut Grads) -> Vec<Option<Tensor>> {
        self.param_vars
            .iter()
            .map(|v| {
                v.map(|v| {
                    grads
                        .take(v)
                        .unwrap_or_else(|| Tensor::zeros(self.tape.value(v).shape()))
                })
            })
            .collect()
    }
}

struct Builder<'a> {
    tape: Tape,
    params: &'a ParamSet,
    param_vars: Vec<Option<Var>>,
    bn_updates: Vec<BnUpdate>,
    mode: Mode,
}

impl Builder<'_> {
    fn param(&mut self, name: &str) -> Result<Var, ModelError> {
        let i = self.params.require(name)?;
        if let Some(v) = self.param_vars[i] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.params.params[i].value.clone(), true);
        self.param_vars[i] = Some(v);
        Ok(v)
    }

    fn stage<T>(stage: &str, r: Result<T, TapeError>) -> Result<T, ModelError> {
        r.map_err(|source| ModelError::Stage {
            stage: stage.to_string(),
            source,
        })
    }

    fn conv_bn_relu(&mut self, x: Var, layer: &str) -> Result<Var, ModelError> {
        let w = self.param(&format!("{layer}.weight"))?;
        let c = Self::stage(layer, self.tape.conv3x3(x, w))?;
        let gamma = self.param(&format!("{layer}.bn.gamma"))?;
        let beta = self.param(&format!("{layer}.bn.beta"))?;
        let mean_index = self.params.require(&format!("{layer}.bn.running_mean"))?;
        let var_index = self.params.require(&format!("{layer}.bn.running_var"))?;
        let (y, stats) = match self.mode {
            Mode::Train => Self::stage(layer, self.tape.batch_norm(c, gamma, beta, BnMode::Train))?,
            Mode::Eval => {
                let mean = self.params.params[mean_index].value.data();
                let var = self.params.params[var_index].value.data();
                Self::stage(layer, self.tape.batch_norm(c, gamma, beta, BnMode::Eval { mean, var }))?
            }
        };
        if let Some(stats) = stats {
            self.bn_updates.push(BnUpdate {
                mean_index,
                var_index,
                stats,
            });
        }
        Ok(self.tape.relu(y))
    }
}

/// Runs the U-Net on `input` (`[n, in_channels, input_hw, input_hw]`) and returns raw logits.
///
/// Parameters are read, never modified; train-mode BN statistics are returned in
/// [`Forward::bn_updates`] for the caller to apply.
pub fn unet_forward(config: &ModelConfig, params: &ParamSet, input: &Tensor, mode: Mode) -> Result<Forward, ModelError> {
    let plan = dim_plan(config)?;
    let [_, c, h, w] = input.shape();
    if c != config.in_channels || h != config.input_hw || w != config.input_hw {
        return Err(ModelError::InputShape {
            got: input.shape(),
            channels: config.in_channels,
            hw: config.input_hw,
        });
    }
    let mut b = Builder {
        tape: Tape::new(),
        params,
        param_vars: vec![None; params.len()],
        bn_updates: Vec::new(),
        mode,
    };
    let mut x = b.tape.leaf(input.clone(), false);
    let mut skips = Vec::with_capacity(config.depth);
    for s in 0..config.depth {
        x = b.conv_bn_relu(x, &format!("down{s}.conv1"))?;
        x = b.conv_bn_relu(x, &format!("down{s}.conv2"))?;
        skips.push(x);
        x = Builder::stage(&format!("down{s}.pool"), b.tape.max_pool2(x))?;
    }
    x = b.conv_bn_relu(x, "bottleneck.conv1")?;
    x = b.conv_bn_relu(x, "bottleneck.conv2")?;
    for s in (0..config.depth).rev() {
        let wu = b.param(&format!("up{s}.upconv.weight"))?;
        let up = Builder::stage(&format!("up{s}.upconv"), b.tape.up_conv2(x, wu))?;
        x = Builder::stage(&format!("up{s}.concat"), b.tape.crop_concat(skips[s], up))?;
        x = b.conv_bn_relu(x, &format!("up{s}.conv1"))?;
        x = b.conv_bn_relu(x, &format!("up{s}.conv2"))?;
    }
    let wf = b.param(FINAL_LAYER)?;
    let logits = Builder::stage("final", b.tape.conv3x3(x, wf))?;
    let shape = b.tape.value(logits).shape();
    debug_assert_eq!((shape[1], shape[2]), (plan.out_channels, plan.output_hw));
    Ok(Forward {
        tape: b.tape,
        logits,
        param_vars: b.param_vars,
        bn_updates: b.bn_updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(depth: usize, hw: usize) -> ModelConfig {
        ModelConfig {
            depth,
            base_channels: 2,
            in_channels: 3,
            out_channels: 4,
            input_hw: hw,
        }
    }

    #[test]
    fn plan_examples() {
        let p = dim_plan(&cfg(2, 68)).unwrap();
        assert_eq!((p.output_hw, p.offset), (26, 21));
        let p = dim_plan(&cfg(0, 16)).unwrap();
        assert_eq!((p.output_hw, p.offset), (10, 3));
        let p = dim_plan(&cfg(2, 64)).unwrap();
        assert_eq!((p.output_hw, p.offset), (22, 21));
        assert_eq!(p.expansive[0].crop, 4);
    }

    #[test]
    fn reference_chain_reports_failing_stage() {
        let err = dim_plan(&ModelConfig::reference(13, 3)).unwrap_err();
        match err {
            ModelError::Infeasible { stage, .. } => assert_eq!(stage, "contracting stage 6 pooling"),
            other => panic!("{other:?}"),
        }
        assert!(satisfies_reference_contract(1468, 706, 381));
        assert!(!satisfies_reference_contract(1468, 706, 380));
    }

    #[test]
    fn too_small_input_is_rejected() {
        assert!(matches!(dim_plan(&cfg(1, 12)), Err(ModelError::Infeasible { .. })));
        assert!(matches!(dim_plan(&cfg(0, 6)), Err(ModelError::Infeasible { .. })));
    }

    #[test]
    fn forward_shapes_follow_plan() {
        for (depth, hw) in [(0, 9), (1, 20), (2, 44), (2, 64)] {
            let c = cfg(depth, hw);
            let plan = dim_plan(&c).unwrap();
            let params = ParamSet::init(&c, 1).unwrap();
            let input = Tensor::filled([2, 3, hw, hw], 0.3);
            let f = unet_forward(&c, &params, &input, Mode::Train).unwrap();
            assert_eq!(f.tape.value(f.logits).shape(), [2, 4, plan.output_hw, plan.output_hw]);
            assert_eq!(2 * plan.offset + plan.output_hw, hw);
        }
    }

    #[test]
    fn zero_filters_give_zero_logits() {
        let c = cfg(1, 20);
        let mut params = ParamSet::init(&c, 5).unwrap();
        for i in 0..params.len() {
            if params.params()[i].kind == ParamKind::Weight {
                let shape = params.params()[i].value.shape();
                params.set_value(i, Tensor::zeros(shape));
            }
        }
        let input = Tensor::filled([1, 3, 20, 20], 1.5);
        for mode in [Mode::Train, Mode::Eval] {
            let f = unet_forward(&c, &params, &input, mode).unwrap();
            assert!(f.tape.value(f.logits).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn input_shape_mismatch_is_reported() {
        let c = cfg(1, 20);
        let params = ParamSet::init(&c, 1).unwrap();
        let err = unet_forward(&c, &params, &Tensor::zeros([1, 2, 20, 20]), Mode::Eval).err();
        assert!(matches!(err, Some(ModelError::InputShape { .. })));
    }

    #[test]
    fn eval_is_pure_and_translation_covariant() {
        let c = cfg(1, 24);
        let params = ParamSet::init(&c, 9).unwrap();
        let plan = dim_plan(&c).unwrap();
        let big = 28;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let field: Vec<f64> = (0..3 * big * big).map(|_| rng.gen_range(0.0..1.0)).collect();
        let field = Tensor::from_vec([1, 3, big, big], field);
        let a = field.crop(0, 0, 24, 24);
        let b = field.crop(2, 2, 24, 24);
        let fa = unet_forward(&c, &params, &a, Mode::Eval).unwrap();
        let fa2 = unet_forward(&c, &params, &a, Mode::Eval).unwrap();
        assert!(fa.tape.value(fa.logits).bit_eq(fa2.tape.value(fa2.logits)));
        let fb = unet_forward(&c, &params, &b, Mode::Eval).unwrap();
        let (ya, yb) = (fa.tape.value(fa.logits), fb.tape.value(fb.logits));
        let o = plan.output_hw;
        for ch in 0..4 {
            for r in 0..o - 2 {
                for col in 0..o - 2 {
                    let va = ya[[0, ch, r + 2, col + 2]];
                    let vb = yb[[0, ch, r, col]];
                    assert!((va - vb).abs() < 1e-12, "{va} vs {vb}");
                }
            }
        }
    }

    #[test]
    fn bn_updates_move_running_stats() {
        let c = cfg(0, 9);
        let mut params = ParamSet::init(&c, 1).unwrap();
        let input = Tensor::filled([2, 3, 9, 9], 2.0);
        let f = unet_forward(&c, &params, &input, Mode::Train).unwrap();
        assert_eq!(f.bn_updates.len(), 2);
        let before = params.get("bottleneck.conv1.bn.running_mean").unwrap().clone();
        params.apply_bn_updates(&f.bn_updates);
        let after = params.get("bottleneck.conv1.bn.running_mean").unwrap();
        assert_ne!(before, *after);
        let idx = params.position("bottleneck.conv1.bn.running_mean").unwrap();
        let batch = &f.bn_updates[0].stats.mean;
        for (k, v) in after.data().iter().enumerate() {
            assert!((v - 0.1 * batch[k]).abs() < 1e-15);
        }
        assert_eq!(f.bn_updates[0].mean_index, idx);
    }

    #[test]
    fn check_against_detects_mismatch() {
        let a = ParamSet::init(&cfg(1, 20), 1).unwrap();
        a.check_against(&cfg(1, 20)).unwrap();
        assert!(a.check_against(&cfg(2, 44)).is_err());
        let mut other = cfg(1, 20);
        other.out_channels = 1;
        assert!(a.check_against(&other).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn forward_shape_matches_plan(depth in 0usize..3, input_hw in 7usize..80, base in 1usize..3, out in 1usize..4) {
            let cfg = ModelConfig { depth, base_channels: base, in_channels: 2, out_channels: out, input_hw };
            if let Ok(plan) = dim_plan(&cfg) {
                prop_assert_eq!(2 * plan.offset + plan.output_hw, plan.input_hw);
                let params = ParamSet::init(&cfg, 1).unwrap();
                let x = Tensor::zeros([1, 2, input_hw, input_hw]);
                let fwd = unet_forward(&cfg, &params, &x, Mode::Eval).unwrap();
                prop_assert_eq!(fwd.tape.value(fwd.logits).shape(), [1, out, plan.output_hw, plan.output_hw]);
            }
        }
    }
}
