//! Training objectives: earth-mover reflectivity loss, soft-CSI loss,
//! cross-entropy, focal loss and sum of squared errors.
//!
//! Each loss exists as a plain function on probability vectors and as a tape
//! node (`*_node`) whose local gradient is computed in closed form.

use thiserror::Error;

use crate::autograd::{Tape, TapeError, Var};
use crate::dataset::{Event, PrecipClass};
use crate::tensor::Tensor;

/// Denominator guard for each soft CSI term.
pub const CSI_EPS: f64 = 1e-8;
/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Tolerance on probability-vector normalisation.
pub const NORM_TOL: f64 = 1e-6;
pub const DEFAULT_GAMMA: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("probability vector sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("focal gamma must be non-negative, got {0}")]
    NegativeGamma(f64),
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("no labelled pixels in batch")]
    Empty,
    #[error("label at item {item}, pixel ({row}, {col}) outside prediction of shape {shape:?}")]
    OutOfBounds {
        item: usize,
        row: usize,
        col: usize,
        shape: [usize; 4],
    },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

fn check_normalized(probs: &[f64]) -> Result<(), LossError> {
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > NORM_TOL {
        return Err(LossError::NotNormalized(s));
    }
    Ok(())
}

/// Σ_r p_r · |(r − 1) − truth| for one pixel (class r has centre r − 1).
pub fn emd_pixel(probs: &[f64], truth: f64) -> Result<f64, LossError> {
    check_normalized(probs)?;
    Ok(probs
        .iter()
        .enumerate()
        .map(|(k, p)| p * (k as f64 - truth).abs())
        .sum())
}

/// Mean per-pixel earth-mover distance.
pub fn emd_pretrain_loss(pixels: &[(&[f64], f64)]) -> Result<f64, LossError> {
    if pixels.is_empty() {
        return Err(LossError::Empty);
    }
    let mut total = 0.0;
    for (p, t) in pixels {
        total += emd_pixel(p, *t)?;
    }
    Ok(total / pixels.len() as f64)
}

/// Soft TP/FP/FN for the RAIN and HEAVY events.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SoftConfusion {
    pub tp: [f64; 2],
    pub fp: [f64; 2],
    pub fn_: [f64; 2],
}

fn slot(e: Event) -> usize {
    match e {
        Event::Rain => 0,
        Event::Heavy => 1,
    }
}

impl SoftConfusion {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tp(&self, e: Event) -> f64 {
        self.tp[slot(e)]
    }

    pub fn fp(&self, e: Event) -> f64 {
        self.fp[slot(e)]
    }

    pub fn fn_(&self, e: Event) -> f64 {
        self.fn_[slot(e)]
    }

    /// Adds one labelled prediction `(p_OTHERS, p_LIGHT, p_HEAVY)`.
    pub fn update(&mut self, probs: [f64; 3], truth: PrecipClass) -> Result<(), LossError> {
        check_normalized(&probs)?;
        for e in Event::ALL {
            let q = e.soft_membership(probs);
            let i = slot(e);
            if e.contains(truth) {
                self.tp[i] += q;
                self.fn_[i] += 1.0 - q;
            } else {
                self.fp[i] += q;
            }
        }
        Ok(())
    }

    /// Soft CSI of one event, 0 when the event never occurs or is never predicted.
    pub fn term(&self, e: Event) -> f64 {
        let i = slot(e);
        self.tp[i] / (self.tp[i] + self.fp[i] + self.fn_[i] + CSI_EPS)
    }

    /// Sum of another accumulator (shards must be merged in a fixed order).
    pub fn merge(&mut self, other: &SoftConfusion) {
        for i in 0..2 {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
        }
    }
}

/// −½ (soft CSI_RAIN + soft CSI_HEAVY), in [−1, 0].
pub fn csi_loss(acc: &SoftConfusion) -> f64 {
    -0.5 * (acc.term(Event::Rain) + acc.term(Event::Heavy))
}

fn truth_prob(probs: [f64; 3], truth: PrecipClass) -> Result<f64, LossError> {
    check_normalized(&probs)?;
    Ok(probs[truth.index()])
}

fn ce_of(q: f64) -> f64 {
    -q.max(PROB_FLOOR).ln()
}

fn ce_grad(q: f64) -> f64 {
    if q > PROB_FLOOR {
        -1.0 / q
    } else {
        0.0
    }
}

fn focal_of(q: f64, gamma: f64) -> f64 {
    (1.0 - q).max(0.0).powf(gamma) * ce_of(q)
}

fn focal_grad(q: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return ce_grad(q);
    }
    let m = (1.0 - q).max(0.0);
    let weight_grad = if m > 0.0 { -gamma * m.powf(gamma - 1.0) * ce_of(q) } else { 0.0 };
    weight_grad + m.powf(gamma) * ce_grad(q)
}

/// −ln q(truth), with q floored at 1e−12.
pub fn cross_entropy_loss(probs: [f64; 3], truth: PrecipClass) -> Result<f64, LossError> {
    Ok(ce_of(truth_prob(probs, truth)?))
}

/// (1 − q(truth))^γ · CE.
pub fn focal_loss(probs: [f64; 3], truth: PrecipClass, gamma: f64) -> Result<f64, LossError> {
    if gamma < 0.0 || gamma.is_nan() {
        return Err(LossError::NegativeGamma(gamma));
    }
    Ok(focal_of(truth_prob(probs, truth)?, gamma))
}

/// Σ (pred − truth)².
pub fn sse_loss(preds: &[f64], truths: &[f64]) -> Result<f64, LossError> {
    if preds.len() != truths.len() {
        return Err(LossError::LengthMismatch(preds.len(), truths.len()));
    }
    Ok(preds.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)).sum())
}

/// Fine-tuning objective for the three-class nowcast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassLoss {
    Csi,
    CrossEntropy,
    Focal { gamma: f64 },
}

impl ClassLoss {
    pub fn name(&self) -> &'static str {
        match self {
            ClassLoss::Csi => "csi",
            ClassLoss::CrossEntropy => "ce",
            ClassLoss::Focal { .. } => "focal",
        }
    }
}

/// A class label at an output-patch pixel of batch item `item`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelClass {
    pub item: usize,
    pub row: usize,
    pub col: usize,
    pub class: PrecipClass,
}

/// A regression target at an output-patch pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelValue {
    pub item: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

fn bounds(shape: [usize; 4], item: usize, row: usize, col: usize) -> Result<(), LossError> {
    if item >= shape[0] || row >= shape[2] || col >= shape[3] {
        return Err(LossError::OutOfBounds { item, row, col, shape });
    }
    Ok(())
}

/// Probabilities of the three classes at one pixel of a `[n, 3, h, w]` tensor.
pub fn pixel_probs(p: &Tensor, item: usize, row: usize, col: usize) -> [f64; 3] {
    [p[[item, 0, row, col]], p[[item, 1, row, col]], p[[item, 2, row, col]]]
}

/// Batch classification loss over labelled pixels of softmax output `probs`.
///
/// The CSI loss pools the whole batch into one [`SoftConfusion`]; CE and focal
/// sum over labelled pixels.
pub fn class_loss_node(tape: &mut Tape, probs: Var, labels: &[PixelClass], loss: ClassLoss) -> Result<Var, LossError> {
    let p = tape.value(probs);
    let shape = p.shape();
    if shape[1] != 3 {
        return Err(LossError::Tape(TapeError::Shape {
            op: "class_loss",
            detail: format!("expected 3 class channels, got {}", shape[1]),
        }));
    }
    if let ClassLoss::Focal { gamma } = loss {
        if gamma < 0.0 || gamma.is_nan() {
            return Err(LossError::NegativeGamma(gamma));
        }
    }
    let mut grad = Tensor::zeros(shape);
    let value = match loss {
        ClassLoss::Csi => {
            let mut acc = SoftConfusion::new();
            for l in labels {
                bounds(shape, l.item, l.row, l.col)?;
                acc.update(pixel_probs(p, l.item, l.row, l.col), l.class)?;
            }
            // ∂T/∂q = 1/D for positives (tp + fn is fixed), −tp/D² for negatives.
            let mut dq = [[0.0; 2]; 2];
            for e in Event::ALL {
                let i = slot(e);
                let d = acc.tp[i] + acc.fp[i] + acc.fn_[i] + CSI_EPS;
                dq[i] = [-0.5 / d, 0.5 * acc.tp[i] / (d * d)];
            }
            for l in labels {
                let gr = dq[0][usize::from(!Event::Rain.contains(l.class))];
                let gh = dq[1][usize::from(!Event::Heavy.contains(l.class))];
                grad[[l.item, 1, l.row, l.col]] += gr;
                grad[[l.item, 2, l.row, l.col]] += gr + gh;
            }
            csi_loss(&acc)
        }
        ClassLoss::CrossEntropy | ClassLoss::Focal { .. } => {
            let gamma = match loss {
                ClassLoss::Focal { gamma } => gamma,
                _ => 0.0,
            };
            let mut total = 0.0;
            for l in labels {
                bounds(shape, l.item, l.row, l.col)?;
                let q = truth_prob(pixel_probs(p, l.item, l.row, l.col), l.class)?;
                total += focal_of(q, gamma);
                grad[[l.item, l.class.index(), l.row, l.col]] += focal_grad(q, gamma);
            }
            total
        }
    };
    Ok(tape.scalar_fn(value, vec![(probs, grad)])?)
}

/// Mean earth-mover distance over every pixel whose truth is not NaN.
///
/// `truth` is `[n, 1, h, w]` reflectivity; `probs` is `[n, r_max, h, w]`.
pub fn emd_node(tape: &mut Tape, probs: Var, truth: &Tensor) -> Result<Var, LossError> {
    let p = tape.value(probs);
    let [n, k, h, w] = p.shape();
    if truth.shape() != [n, 1, h, w] {
        return Err(LossError::Tape(TapeError::Shape {
            op: "emd",
            detail: format!("truth {:?} for prediction {:?}", truth.shape(), p.shape()),
        }));
    }
    let plane = h * w;
    let count = truth.data().iter().filter(|t| !t.is_nan()).count();
    if count == 0 {
        return Err(LossError::Empty);
    }
    let inv = 1.0 / count as f64;
    let mut grad = Tensor::zeros(p.shape());
    let mut total = 0.0;
    let mut pix = vec![0.0; k];
    for b in 0..n {
        let tv = truth.channel(b, 0);
        let pv = p.item_slice(b);
        let gv = &mut grad.data_mut()[b * k * plane..(b + 1) * k * plane];
        for i in 0..plane {
            let t = tv[i];
            if t.is_nan() {
                continue;
            }
            for r in 0..k {
                pix[r] = pv[r * plane + i];
            }
            total += emd_pixel(&pix, t)?;
            for r in 0..k {
                gv[r * plane + i] = (r as f64 - t).abs() * inv;
            }
        }
    }
    Ok(tape.scalar_fn(total * inv, vec![(probs, grad)])?)
}

/// Sum of squared errors between `[n, 1, h, w]` predictions and station targets.
pub fn sse_node(tape: &mut Tape, preds: Var, targets: &[PixelValue]) -> Result<Var, LossError> {
    let p = tape.value(preds);
    let shape = p.shape();
    let mut grad = Tensor::zeros(shape);
    let mut total = 0.0;
    for t in targets {
        bounds(shape, t.item, t.row, t.col)?;
        let d = p[[t.item, 0, t.row, t.col]] - t.value;
        total += d * d;
        grad[[t.item, 0, t.row, t.col]] += 2.0 * d;
    }
    Ok(tape.scalar_fn(total, vec![(preds, grad)])?)
}
