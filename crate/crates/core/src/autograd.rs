//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! Every forward call appends a node holding its output and whatever the
//! backward pass needs; [`Tape::backward`] then walks the nodes in reverse.
//! All kernels parallelise only over independent outputs, so results are
//! bit-identical for any worker-thread count.

use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar([usize; 4]),
}

fn shape_err(op: &'static str, detail: String) -> TapeError {
    TapeError::Shape { op, detail }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Statistics source for batch normalisation.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalise with the batch statistics.
    Train,
    /// Normalise with fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics observed in train mode (variance unbiased).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv3x3 { x: Var, w: Var },
    UpConv2 { x: Var, w: Var },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    CropConcat { skip: Var, up: Var, top: usize, left: usize },
    Softmax { x: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    /// Scalar whose local gradients with respect to each input are precomputed.
    Scalar { inputs: Vec<(Var, Tensor)> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where no gradient flows.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (d, s) in y.iter_mut().zip(x) {
        *d += alpha * s;
    }
}

fn nonzero_channels(x: &Tensor) -> Vec<bool> {
    let [n, c, _, _] = x.shape();
    (0..n * c)
        .map(|i| x.channel(i / c, i % c).iter().any(|&v| v != 0.0))
        .collect()
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => axpy(1.0, g.data(), acc.data_mut()),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The branch taken by every non-smooth operation (ReLU sign, max-pool
    /// argmax). Two forward passes with equal patterns lie on the same smooth
    /// piece of the network, so finite differences between them are meaningful.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => out.extend(self.nodes[x.0].value.data().iter().map(|&v| u32::from(v > 0.0))),
                Op::MaxPool2 { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input (`requires_grad`) or a constant.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Valid 3×3 convolution, stride 1, no bias. Filters are `[c_out, c_in, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var, TapeError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape();
        let [cout, wcin, kh, kw] = wv.shape();
        if (wcin, kh, kw) != (cin, 3, 3) {
            return Err(shape_err(
                "conv3x3",
                format!("filters {:?} do not fit input {:?}", wv.shape(), xv.shape()),
            ));
        }
        if h < 3 || wd < 3 {
            return Err(shape_err("conv3x3", format!("input {h}x{wd} smaller than 3x3")));
        }
        let (oh, ow) = (h - 2, wd - 2);
        let nz = nonzero_channels(xv);
        let mut y = Tensor::zeros([n, cout, oh, ow]);
        y.data_mut()
            .par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(idx, out)| {
                let (b, co) = (idx / cout, idx % cout);
                for ci in 0..cin {
                    if !nz[b * cin + ci] {
                        continue;
                    }
                    let inp = xv.channel(b, ci);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let k = wv[[co, ci, ky, kx]];
                            for oy in 0..oh {
                                let src = &inp[(oy + ky) * wd + kx..][..ow];
                                axpy(k, src, &mut out[oy * ow..][..ow]);
                            }
                        }
                    }
                }
            });
        Ok(self.push(y, Op::Conv3x3 { x, w }, &[x, w]))
    }

    /// Transposed 2×2 convolution with stride 2. Filters are `[c_in, c_out, 2, 2]`.
    pub fn up_conv2(&mut self, x: Var, w: Var) -> Result<Var, TapeError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape();
        let [wcin, cout, kh, kw] = wv.shape();
        if (wcin, kh, kw) != (cin, 2, 2) {
            return Err(shape_err(
                "up_conv2",
                format!("filters {:?} do not fit input {:?}", wv.shape(), xv.shape()),
            ));
        }
        let (oh, ow) = (2 * h, 2 * wd);
        let mut y = Tensor::zeros([n, cout, oh, ow]);
        y.data_mut()
            .par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(idx, out)| {
                let (b, co) = (idx / cout, idx % cout);
                for ci in 0..cin {
                    let inp = xv.channel(b, ci);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let k = wv[[ci, co, dy, dx]];
                            for i in 0..h {
                                let row = &mut out[(2 * i + dy) * ow..][..ow];
                                for j in 0..wd {
                                    row[2 * j + dx] += k * inp[i * wd + j];
                                }
                            }
                        }
                    }
                }
            });
        Ok(self.push(y, Op::UpConv2 { x, w }, &[x, w]))
    }

    /// Per-channel batch normalisation with affine `gamma`, `beta` (shape `[1, c, 1, 1]`).
    /// In train mode also returns the observed batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>), TapeError> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [1, c, 1, 1] {
                return Err(shape_err(
                    "batch_norm",
                    format!("{name} shape {:?} for {c} channels", self.value(p).shape()),
                ));
            }
        }
        let count = (n * h * w) as f64;
        let mut xhat = Tensor::zeros(xv.shape());
        let mut inv_std = vec![0.0; c];
        let mut stats = BatchStats {
            mean: vec![0.0; c],
            var: vec![0.0; c],
        };
        for ch in 0..c {
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xv.channel(b, ch).iter().sum::<f64>();
                    }
                    let mean = s / count;
                    let mut ss = 0.0;
                    for b in 0..n {
                        ss += xv.channel(b, ch).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = ss / count;
                    stats.mean[ch] = mean;
                    stats.var[ch] = if count > 1.0 { ss / (count - 1.0) } else { var };
                    (mean, var)
                }
                BnMode::Eval { mean, var } => (mean[ch], var[ch]),
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            for b in 0..n {
                let src = xv.channel(b, ch);
                for (d, &s) in xhat.channel_mut(b, ch).iter_mut().zip(src) {
                    *d = (s - mean) * is;
                }
            }
        }
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut y = xhat.clone();
        for b in 0..n {
            for ch in 0..c {
                for v in y.channel_mut(b, ch) {
                    *v = g[ch] * *v + be[ch];
                }
            }
        }
        let train = matches!(mode, BnMode::Train);
        let var = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((var, train.then_some(stats)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu { x }, &[x])
    }

    /// 2×2 max pooling, stride 2; ties go to the first element in row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, TapeError> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("max_pool2", format!("odd input size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        for b in 0..n {
            for ch in 0..c {
                let src = xv.channel(b, ch);
                let base = (b * c + ch) * oh * ow;
                let dst = y.channel_mut(b, ch);
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = (2 * i) * w + 2 * j;
                        for cand in [(2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j, (2 * i + 1) * w + 2 * j + 1] {
                            if src[cand] > src[best] {
                                best = cand;
                            }
                        }
                        dst[i * ow + j] = src[best];
                        argmax[base + i * ow + j] = best as u32;
                    }
                }
            }
        }
        Ok(self.push(y, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Centre-crops `skip` to `up`'s spatial size and concatenates, skip channels first.
    pub fn crop_concat(&mut self, skip: Var, up: Var) -> Result<Var, TapeError> {
        let s = self.value(skip);
        let u = self.value(up);
        let [n, cs, hs, ws] = s.shape();
        let [nu, cu, hu, wu] = u.shape();
        if n != nu || cs != cu {
            return Err(shape_err(
                "crop_concat",
                format!("skip {:?} and up {:?} differ in batch or channels", s.shape(), u.shape()),
            ));
        }
        if hs < hu || ws < wu || (hs - hu) % 2 != 0 || (ws - wu) % 2 != 0 {
            return Err(shape_err(
                "crop_concat",
                format!("cannot centre-crop {hs}x{ws} to {hu}x{wu}"),
            ));
        }
        let (top, left) = ((hs - hu) / 2, (ws - wu) / 2);
        let cropped = s.crop(top, left, hu, wu);
        let mut y = Tensor::zeros([n, cs + cu, hu, wu]);
        for b in 0..n {
            for ch in 0..cs {
                y.channel_mut(b, ch).copy_from_slice(cropped.channel(b, ch));
            }
            for ch in 0..cu {
                y.channel_mut(b, cs + ch).copy_from_slice(u.channel(b, ch));
            }
        }
        Ok(self.push(y, Op::CropConcat { skip, up, top, left }, &[skip, up]))
    }

    /// Softmax across channels at every pixel, stabilised by max subtraction.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = h * w;
        let mut y = Tensor::zeros(xv.shape());
        for b in 0..n {
            let src = xv.item_slice(b);
            let dst = &mut y.data_mut()[b * c * plane..(b + 1) * c * plane];
            for p in 0..plane {
                let m = (0..c).map(|k| src[k * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..c {
                    let e = (src[k * plane + p] - m).exp();
                    dst[k * plane + p] = e;
                    z += e;
                }
                for k in 0..c {
                    dst[k * plane + p] /= z;
                }
            }
        }
        self.push(y, Op::Softmax { x }, &[x])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let y = Tensor::from_vec(av.shape(), av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect());
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, &[x])
    }

    /// A scalar node with known value and local gradients `∂value/∂input`.
    pub fn scalar_fn(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Result<Var, TapeError> {
        for (v, g) in &inputs {
            if self.value(*v).shape() != g.shape() {
                return Err(shape_err(
                    "scalar_fn",
                    format!("gradient {:?} for input {:?}", g.shape(), self.value(*v).shape()),
                ));
            }
        }
        let vars: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        Ok(self.push(Tensor::scalar(value), Op::Scalar { inputs }, &vars))
    }

    /// Gradients of the scalar `out` with respect to every node that needs one.
    pub fn backward(&self, out: Var) -> Result<Grads, TapeError> {
        let shape = self.value(out).shape();
        if shape != [1, 1, 1, 1] {
            return Err(TapeError::NonScalar(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            let wants = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Conv3x3 { x, w } => {
                    let (gx, gw) = self.conv_backward(*x, *w, &gy, wants(x), wants(w));
                    if let Some(g) = gx {
                        add_into(&mut grads[x.0], g);
                    }
                    if let Some(g) = gw {
                        add_into(&mut grads[w.0], g);
                    }
                }
                Op::UpConv2 { x, w } => {
                    let (gx, gw) = self.up_conv_backward(*x, *w, &gy, wants(x), wants(w));
                    if let Some(g) = gx {
                        add_into(&mut grads[x.0], g);
                    }
                    if let Some(g) = gw {
                        add_into(&mut grads[w.0], g);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let [n, c, h, w] = xhat.shape();
                    let count = (n * h * w) as f64;
                    let g = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let dy = gy.channel(b, ch);
                            dbeta[ch] += dy.iter().sum::<f64>();
                            dgamma[ch] += dot(dy, xhat.channel(b, ch));
                        }
                    }
                    if wants(x) {
                        let mut gx = Tensor::zeros(xhat.shape());
                        for ch in 0..c {
                            let scale = g[ch] * inv_std[ch];
                            for b in 0..n {
                                let dy = gy.channel(b, ch);
                                let xh = xhat.channel(b, ch);
                                let dst = gx.channel_mut(b, ch);
                                if *train {
                                    let (sb, sg) = (dbeta[ch] / count, dgamma[ch] / count);
                                    for ((d, &dyv), &xv) in dst.iter_mut().zip(dy).zip(xh) {
                                        *d = scale * (dyv - sb - xv * sg);
                                    }
                                } else {
                                    for (d, &dyv) in dst.iter_mut().zip(dy) {
                                        *d = scale * dyv;
                                    }
                                }
                            }
                        }
                        add_into(&mut grads[x.0], gx);
                    }
                    if wants(gamma) {
                        add_into(&mut grads[gamma.0], Tensor::from_vec([1, c, 1, 1], dgamma));
                    }
                    if wants(beta) {
                        add_into(&mut grads[beta.0], Tensor::from_vec([1, c, 1, 1], dbeta));
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let gx = Tensor::from_vec(
                        xv.shape(),
                        xv.data()
                            .iter()
                            .zip(gy.data())
                            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                            .collect(),
                    );
                    add_into(&mut grads[x.0], gx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let [n, c, h, w] = self.value(*x).shape();
                    let mut gx = Tensor::zeros([n, c, h, w]);
                    let plane_out = gy.h() * gy.w();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane_out;
                            let dy = gy.channel(b, ch);
                            let dst = gx.channel_mut(b, ch);
                            for (k, &g) in dy.iter().enumerate() {
                                dst[argmax[base + k] as usize] += g;
                            }
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
                Op::CropConcat { skip, up, top, left } => {
                    let [n, _, hu, wu] = gy.shape();
                    let sshape = self.value(*skip).shape();
                    let cs = sshape[1];
                    let cu = self.value(*up).c();
                    if wants(skip) {
                        let mut gs = Tensor::zeros(sshape);
                        let ws = sshape[3];
                        for b in 0..n {
                            for ch in 0..cs {
                                let src = gy.channel(b, ch);
                                let dst = gs.channel_mut(b, ch);
                                for r in 0..hu {
                                    dst[(top + r) * ws + left..][..wu].copy_from_slice(&src[r * wu..][..wu]);
                                }
                            }
                        }
                        add_into(&mut grads[skip.0], gs);
                    }
                    if wants(up) {
                        let mut gu = Tensor::zeros([n, cu, hu, wu]);
                        for b in 0..n {
                            for ch in 0..cu {
                                gu.channel_mut(b, ch).copy_from_slice(gy.channel(b, cs + ch));
                            }
                        }
                        add_into(&mut grads[up.0], gu);
                    }
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let [n, c, h, w] = y.shape();
                    let plane = h * w;
                    let mut gx = Tensor::zeros(y.shape());
                    for b in 0..n {
                        let yv = y.item_slice(b);
                        let dy = gy.item_slice(b);
                        let dst = &mut gx.data_mut()[b * c * plane..(b + 1) * c * plane];
                        for p in 0..plane {
                            let s: f64 = (0..c).map(|k| dy[k * plane + p] * yv[k * plane + p]).sum();
                            for k in 0..c {
                                dst[k * plane + p] = yv[k * plane + p] * (dy[k * plane + p] - s);
                            }
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = gy.data().iter().zip(bv.data()).map(|(g, v)| g * v).collect();
                    let gb: Vec<f64> = gy.data().iter().zip(av.data()).map(|(g, v)| g * v).collect();
                    if wants(a) {
                        add_into(&mut grads[a.0], Tensor::from_vec(av.shape(), ga));
                    }
                    if wants(b) {
                        add_into(&mut grads[b.0], Tensor::from_vec(bv.shape(), gb));
                    }
                }
                Op::Sum { x } => {
                    add_into(&mut grads[x.0], Tensor::filled(self.value(*x).shape(), gy.item()));
                }
                Op::Scalar { inputs } => {
                    let up = gy.item();
                    for (v, local) in inputs {
                        if wants(v) {
                            add_into(&mut grads[v.0], local.map(|g| g * up));
                        }
                    }
                }
            }
        }
        Ok(Grads(grads))
    }

    fn conv_backward(&self, x: Var, w: Var, gy: &Tensor, want_x: bool, want_w: bool) -> (Option<Tensor>, Option<Tensor>) {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape();
        let cout = wv.n();
        let (oh, ow) = (h - 2, wd - 2);
        let gw = want_w.then(|| {
            let nz = nonzero_channels(xv);
            let mut gw = Tensor::zeros(wv.shape());
            gw.data_mut().par_chunks_mut(9).enumerate().for_each(|(idx, taps)| {
                let (co, ci) = (idx / cin, idx % cin);
                for b in 0..n {
                    if !nz[b * cin + ci] {
                        continue;
                    }
                    let dy = gy.channel(b, co);
                    let inp = xv.channel(b, ci);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let mut s = 0.0;
                            for oy in 0..oh {
                                s += dot(&dy[oy * ow..][..ow], &inp[(oy + ky) * wd + kx..][..ow]);
                            }
                            taps[ky * 3 + kx] += s;
                        }
                    }
                }
            });
            gw
        });
        let gx = want_x.then(|| {
            let mut gx = Tensor::zeros(xv.shape());
            gx.data_mut().par_chunks_mut(h * wd).enumerate().for_each(|(idx, dst)| {
                let (b, ci) = (idx / cin, idx % cin);
                for co in 0..cout {
                    let dy = gy.channel(b, co);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let k = wv[[co, ci, ky, kx]];
                            for oy in 0..oh {
                                axpy(k, &dy[oy * ow..][..ow], &mut dst[(oy + ky) * wd + kx..][..ow]);
                            }
                        }
                    }
                }
            });
            gx
        });
        (gx, gw)
    }

    fn up_conv_backward(&self, x: Var, w: Var, gy: &Tensor, want_x: bool, want_w: bool) -> (Option<Tensor>, Option<Tensor>) {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape();
        let cout = wv.shape()[1];
        let ow = 2 * wd;
        let gw = want_w.then(|| {
            let mut gw = Tensor::zeros(wv.shape());
            gw.data_mut().par_chunks_mut(4).enumerate().for_each(|(idx, taps)| {
                let (ci, co) = (idx / cout, idx % cout);
                for b in 0..n {
                    let inp = xv.channel(b, ci);
                    let dy = gy.channel(b, co);
                    for dyy in 0..2 {
                        for dxx in 0..2 {
                            let mut s = 0.0;
                            for i in 0..h {
                                let row = &dy[(2 * i + dyy) * ow..][..ow];
                                for j in 0..wd {
                                    s += inp[i * wd + j] * row[2 * j + dxx];
                                }
                            }
                            taps[dyy * 2 + dxx] += s;
                        }
                    }
                }
            });
            gw
        });
        let gx = want_x.then(|| {
            let mut gx = Tensor::zeros(xv.shape());
            gx.data_mut().par_chunks_mut(h * wd).enumerate().for_each(|(idx, dst)| {
                let (b, ci) = (idx / cin, idx % cin);
                for co in 0..cout {
                    let dy = gy.channel(b, co);
                    for dyy in 0..2 {
                        for dxx in 0..2 {
                            let k = wv[[ci, co, dyy, dxx]];
                            for i in 0..h {
                                let row = &dy[(2 * i + dyy) * ow..][..ow];
                                for j in 0..wd {
                                    dst[i * wd + j] += k * row[2 * j + dxx];
                                }
                            }
                        }
                    }
                }
            });
            gx
        });
        (gx, gw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn quadratic_probe() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(w, w).unwrap();
        let out = tape.sum(sq);
        assert_eq!(tape.value(out).item(), 9.0);
        assert_eq!(tape.backward(out).unwrap().get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn conv_of_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled([1, 1, 4, 4], 1.0), false);
        let w = tape.leaf(Tensor::filled([1, 1, 3, 3], 1.0), true);
        let y = tape.conv3x3(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0; 4]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        // every tap is used once per output pixel: h_out × w_out = 4
        assert!(g.get(w).unwrap().data().iter().all(|&v| v == 4.0));
        assert!(g.get(x).is_none());
    }

    #[test]
    fn conv_identity_kernel_crops() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..25).map(f64::from).collect();
        let x = tape.leaf(Tensor::from_vec([1, 1, 5, 5], data), false);
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k[[0, 0, 1, 1]] = 1.0;
        let w = tape.leaf(k, false);
        let y = tape.conv3x3(x, w).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 1, 3, 3]);
        assert_eq!(tape.value(y).data(), &[6.0, 7.0, 8.0, 11.0, 12.0, 13.0, 16.0, 17.0, 18.0]);
    }

    #[test]
    fn conv_rejects_small_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 5]), false);
        let w = tape.leaf(Tensor::zeros([1, 1, 3, 3]), false);
        assert!(tape.conv3x3(x, w).is_err());
    }

    #[test]
    fn max_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), false);
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let x = tape.leaf(Tensor::from_vec([1, 1, 2, 2], vec![-1.0, -2.0, -3.0, -4.0]), false);
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0]);
        let x = tape.leaf(Tensor::zeros([2, 3, 6, 4]), false);
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).shape(), [2, 3, 3, 2]);
        let odd = tape.leaf(Tensor::zeros([1, 1, 3, 4]), false);
        assert!(tape.max_pool2(odd).is_err());
    }

    #[test]
    fn branch_pattern_tracks_relu_and_pool() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec([1, 1, 2, 2], vec![1.0, -2.0, 3.0, -4.0]), false);
        let r = tape.relu(x);
        tape.max_pool2(x).unwrap();
        tape.max_pool2(r).unwrap();
        // relu signs, then the argmax of each pooled window
        assert_eq!(tape.branch_pattern(), vec![1, 0, 1, 0, 2, 2]);
    }

    #[test]
    fn up_conv_single_site() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec([1, 2, 1, 1], vec![2.0, -1.0]), false);
        let k1 = [1.0, 2.0, 3.0, 4.0];
        let k2 = [0.5, 0.0, -1.0, 10.0];
        let mut wd = k1.to_vec();
        wd.extend(k2);
        let w = tape.leaf(Tensor::from_vec([2, 1, 2, 2], wd), false);
        let y = tape.up_conv2(x, w).unwrap();
        let expect: Vec<f64> = (0..4).map(|i| 2.0 * k1[i] - k2[i]).collect();
        assert_eq!(tape.value(y).data(), expect.as_slice());

        let z = tape.leaf(Tensor::zeros([1, 64, 3, 3]), false);
        let wz = tape.leaf(Tensor::filled([64, 32, 2, 2], 1.0), false);
        let yz = tape.up_conv2(z, wz).unwrap();
        assert_eq!(tape.value(yz).shape(), [1, 32, 6, 6]);
        assert!(tape.value(yz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_concat_rules() {
        let mut tape = Tape::new();
        let skip = tape.leaf(Tensor::zeros([1, 2, 8, 8]), false);
        let up = tape.leaf(Tensor::zeros([1, 2, 4, 4]), false);
        let y = tape.crop_concat(skip, up).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 4, 4, 4]);
        let same = tape.leaf(Tensor::filled([1, 2, 4, 4], 1.0), false);
        let y = tape.crop_concat(same, up).unwrap();
        assert_eq!(tape.value(y).channel(0, 0), &[1.0; 16]);
        assert_eq!(tape.value(y).channel(0, 3), &[0.0; 16]);
        let odd = tape.leaf(Tensor::zeros([1, 2, 7, 7]), false);
        assert!(tape.crop_concat(odd, up).is_err());
        let narrow = tape.leaf(Tensor::zeros([1, 1, 4, 4]), false);
        assert!(tape.crop_concat(skip, narrow).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec([1, 2, 1, 1], vec![0.0, 3f64.ln()]), false);
        let y = tape.softmax_channels(x);
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        let x = tape.leaf(Tensor::filled([1, 4, 2, 2], 7.0), false);
        let y = tape.softmax_channels(x);
        assert!(tape.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn batch_norm_modes() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = random([3, 2, 4, 4], &mut rng);
        let x = tape.leaf(xt.clone(), false);
        let g = tape.leaf(Tensor::from_vec([1, 2, 1, 1], vec![2.0, 0.5]), false);
        let b = tape.leaf(Tensor::from_vec([1, 2, 1, 1], vec![1.0, -3.0]), false);
        let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train).unwrap();
        assert!(stats.is_some());
        for (ch, (shift, scale)) in [(1.0, 2.0), (-3.0, 0.5)].into_iter().enumerate() {
            let vals: Vec<f64> = (0..3).flat_map(|n| tape.value(y).channel(n, ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!((m - shift).abs() < 1e-12);
            assert!((v - scale * scale).abs() < 1e-3);
        }
        let ones = tape.leaf(Tensor::filled([1, 2, 1, 1], 1.0), false);
        let zeros = tape.leaf(Tensor::zeros([1, 2, 1, 1]), false);
        let (y, stats) = tape
            .batch_norm(x, ones, zeros, BnMode::Eval { mean: &[0.0, 0.0], var: &[1.0, 1.0] })
            .unwrap();
        assert!(stats.is_none());
        let r = tape.relu(y);
        for (a, e) in tape.value(r).data().iter().zip(xt.data()) {
            assert!((a - e.max(0.0) / (1.0 + BN_EPS).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]), true);
        assert_eq!(tape.backward(x).err(), Some(TapeError::NonScalar([1, 1, 2, 2])));
    }

    /// Central-difference check of every op through a random scalar projection.
    #[test]
    fn ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xt = random([2, 2, 10, 10], &mut rng);
        let wt = random([2, 2, 3, 3], &mut rng);
        let ut = random([2, 2, 2, 2], &mut rng);
        let gt = random([1, 2, 1, 1], &mut rng);
        let bt = random([1, 2, 1, 1], &mut rng);
        let proj = random([2, 4, 6, 6], &mut rng);
        let f = |xt: &Tensor, wt: &Tensor, ut: &Tensor, gt: &Tensor, bt: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.leaf(xt.clone(), true);
            let w = tape.leaf(wt.clone(), true);
            let u = tape.leaf(ut.clone(), true);
            let g = tape.leaf(gt.clone(), true);
            let b = tape.leaf(bt.clone(), true);
            let c = tape.conv3x3(x, w).unwrap();
            let (n, _) = tape.batch_norm(c, g, b, BnMode::Train).unwrap();
            let r = tape.relu(n);
            let c2 = tape.conv3x3(r, w).unwrap();
            let p = tape.max_pool2(c2).unwrap();
            let up = tape.up_conv2(p, u).unwrap();
            let cc = tape.crop_concat(c, up).unwrap();
            let sm = tape.softmax_channels(cc);
            let pj = tape.leaf(proj.clone(), false);
            let m = tape.mul(sm, pj).unwrap();
            let out = tape.sum(m);
            (tape, [x, w, u, g, b], out)
        };
        let params = [xt, wt, ut, gt, bt];
        let (tape, vars, out) = f(&params[0], &params[1], &params[2], &params[3], &params[4]);
        let grads = tape.backward(out).unwrap();
        let eval = |ps: &[Tensor; 5]| {
            let (t, _, o) = f(&ps[0], &ps[1], &ps[2], &ps[3], &ps[4]);
            t.value(o).item()
        };
        let h = 1e-5;
        for (k, var) in vars.iter().enumerate() {
            let g = grads.get(*var).unwrap();
            for idx in (0..params[k].len()).step_by(3) {
                let mut plus = params.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = params.clone();
                minus[k].data_mut()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-4, "param {k} index {idx}: fd {fd} analytic {an}");
            }
        }
    }
}
