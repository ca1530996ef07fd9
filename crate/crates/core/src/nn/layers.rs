//! Layer kinds with hand-written forward and backward passes.
//!
//! Layouts are channels-last: `(B, L, C)` for 1D, `(B, H, W, C)` for 2D and
//! `(B, S, D)` for attention. Shapes passed to [`build`] exclude the batch axis.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Input {
        shape: Vec<usize>,
    },
    Conv1D {
        filters: usize,
        kernel_size: usize,
        padding: Padding,
        activation: Activation,
        l2: f64,
    },
    Conv2D {
        filters: usize,
        kernel_size: [usize; 2],
        padding: Padding,
        activation: Activation,
        l2: f64,
    },
    MaxPool1D {
        pool: usize,
    },
    MaxPool2D {
        pool: usize,
    },
    Dense {
        units: usize,
        activation: Activation,
        l1: f64,
        l2: f64,
    },
    ReLU,
    Softmax,
    Flatten,
    Dropout {
        rate: f64,
    },
    BatchNorm {
        momentum: f64,
        eps: f64,
    },
    MultiHeadAttention {
        heads: usize,
        key_dim: usize,
    },
    Add,
    LayerNorm {
        eps: f64,
    },
    Concat,
}

impl LayerSpec {
    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerSpec::Dense { units, activation, l1: 0.0, l2: 0.0 }
    }

    pub fn batch_norm() -> Self {
        LayerSpec::BatchNorm { momentum: 0.99, eps: 1e-3 }
    }

    pub fn layer_norm() -> Self {
        LayerSpec::LayerNorm { eps: 1e-3 }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "Input",
            LayerSpec::Conv1D { .. } => "Conv1D",
            LayerSpec::Conv2D { .. } => "Conv2D",
            LayerSpec::MaxPool1D { .. } => "MaxPool1D",
            LayerSpec::MaxPool2D { .. } => "MaxPool2D",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::ReLU => "ReLU",
            LayerSpec::Softmax => "Softmax",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Dropout { .. } => "Dropout",
            LayerSpec::BatchNorm { .. } => "BatchNorm",
            LayerSpec::MultiHeadAttention { .. } => "MultiHeadAttention",
            LayerSpec::Add => "Add",
            LayerSpec::LayerNorm { .. } => "LayerNorm",
            LayerSpec::Concat => "Concat",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Build(format!("{}: {msg}", self.kind())));
        let reg_ok = |v: f64| v.is_finite() && v >= 0.0;
        match *self {
            LayerSpec::Input { ref shape } if shape.is_empty() || shape.contains(&0) => {
                bad("input dimensions must be positive")
            }
            LayerSpec::Conv1D { filters, kernel_size, l2, .. } => {
                if filters == 0 || kernel_size == 0 {
                    bad("filters and kernel size must be positive")
                } else if !reg_ok(l2) {
                    bad("l2 must be non-negative")
                } else {
                    Ok(())
                }
            }
            LayerSpec::Conv2D { filters, kernel_size, l2, .. } => {
                if filters == 0 || kernel_size.contains(&0) {
                    bad("filters and kernel size must be positive")
                } else if !reg_ok(l2) {
                    bad("l2 must be non-negative")
                } else {
                    Ok(())
                }
            }
            LayerSpec::MaxPool1D { pool } | LayerSpec::MaxPool2D { pool } if pool == 0 => {
                bad("pool size must be positive")
            }
            LayerSpec::Dense { units, l1, l2, .. } => {
                if units == 0 {
                    bad("units must be positive")
                } else if !reg_ok(l1) || !reg_ok(l2) {
                    bad("regularization must be non-negative")
                } else {
                    Ok(())
                }
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => bad("rate must lie in [0, 1)"),
            LayerSpec::BatchNorm { momentum, eps } if !(0.0..1.0).contains(&momentum) || eps <= 0.0 => {
                bad("momentum must lie in [0, 1) and eps be positive")
            }
            LayerSpec::LayerNorm { eps } if eps <= 0.0 => bad("eps must be positive"),
            LayerSpec::MultiHeadAttention { heads, key_dim } if heads == 0 || key_dim == 0 => {
                bad("heads and key_dim must be positive")
            }
            _ => Ok(()),
        }
    }
}

/// A weight tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub trainable: bool,
    pub l1: f64,
    pub l2: f64,
}

impl Param {
    fn new(name: String, value: Tensor, l1: f64, l2: f64) -> Self {
        let z = Tensor::zeros(value.shape());
        Self { name, grad: z.clone(), m: z.clone(), v: z, value, trainable: true, l1, l2 }
    }

    fn uniform(name: String, shape: &[usize], limit: f64, l1: f64, l2: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        Self::new(name, Tensor::new(shape.to_vec(), data).expect("sized"), l1, l2)
    }

    fn constant(name: String, shape: &[usize], v: f64) -> Self {
        Self::new(name, Tensor::full(shape, v), 0.0, 0.0)
    }

    pub fn regularization_loss(&self) -> f64 {
        let d = self.value.data();
        let mut s = 0.0;
        if self.l1 > 0.0 {
            s += self.l1 * d.iter().map(|w| w.abs()).sum::<f64>();
        }
        if self.l2 > 0.0 {
            s += self.l2 * d.iter().map(|w| w * w).sum::<f64>();
        }
        s
    }

    pub(crate) fn add_regularization_grad(&mut self) {
        if self.l1 == 0.0 && self.l2 == 0.0 {
            return;
        }
        let (l1, l2) = (self.l1, self.l2);
        for (g, &w) in self.grad.data_mut().iter_mut().zip(self.value.data()) {
            // sign(0) = 0 keeps the L1 subgradient symmetric
            let s = if w > 0.0 { 1.0 } else if w < 0.0 { -1.0 } else { 0.0 };
            *g += l1 * s + 2.0 * l2 * w;
        }
    }
}

fn he_limit(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn init_limit(act: Activation, fan_in: usize, fan_out: usize) -> f64 {
    match act {
        Activation::Relu => he_limit(fan_in),
        Activation::Linear => glorot_limit(fan_in, fan_out),
    }
}

fn same_pad(k: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => (k - 1) / 2,
        Padding::Valid => 0,
    }
}

fn conv_out(len: usize, k: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(len),
        Padding::Valid => len.checked_sub(k).map(|v| v + 1),
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct MhaCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Input,
    Dense { w: Param, b: Param, act: Activation },
    Conv1D { w: Param, b: Param, pad: usize, act: Activation },
    Conv2D { w: Param, b: Param, pad: [usize; 2], act: Activation },
    MaxPool1D { pool: usize, argmax: Vec<usize> },
    MaxPool2D { pool: usize, argmax: Vec<usize> },
    Relu,
    Softmax,
    Flatten,
    Dropout { rate: f64, mask: Vec<f64> },
    BatchNorm { gamma: Param, beta: Param, running_mean: Vec<f64>, running_var: Vec<f64>, momentum: f64, eps: f64, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    LayerNorm { gamma: Param, beta: Param, eps: f64, xhat: Vec<f64>, inv_std: Vec<f64> },
    Mha { wq: Param, bq: Param, wk: Param, bk: Param, wv: Param, bv: Param, wo: Param, bo: Param, heads: usize, key_dim: usize, cache: MhaCache },
    Add,
    Concat,
}

/// Instantiates a layer for the given input shapes, drawing initial weights
/// from `rng`, and returns it with its output shape.
pub(crate) fn build(
    spec: &LayerSpec,
    name: &str,
    inputs: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
) -> Result<(Layer, Vec<usize>)> {
    spec.validate()?;
    let err = |msg: String| Error::shape(name, msg);
    let expect_inputs = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(err(format!("expects {n} input(s), got {}", inputs.len())));
        }
        Ok(())
    };
    let pname = |p: &str| format!("{name}/{p}");
    match spec {
        LayerSpec::Input { shape } => Ok((Layer::Input, shape.clone())),
        LayerSpec::Dense { units, activation, l1, l2 } => {
            expect_inputs(1)?;
            let s = &inputs[0];
            let d_in = *s.last().expect("non-empty shape");
            let limit = init_limit(*activation, d_in, *units);
            let w = Param::uniform(pname("kernel"), &[d_in, *units], limit, *l1, *l2, rng);
            let b = Param::constant(pname("bias"), &[*units], 0.0);
            let mut out = s.clone();
            *out.last_mut().expect("non-empty") = *units;
            Ok((Layer::Dense { w, b, act: *activation }, out))
        }
        LayerSpec::Conv1D { filters, kernel_size, padding, activation, l2 } => {
            expect_inputs(1)?;
            let s = &inputs[0];
            if s.len() != 2 {
                return Err(err(format!("expects (length, channels), got {s:?}")));
            }
            let (len, c) = (s[0], s[1]);
            let out_len = conv_out(len, *kernel_size, *padding)
                .filter(|&v| v > 0)
                .ok_or_else(|| err(format!("kernel {kernel_size} exceeds length {len}")))?;
            let limit = init_limit(*activation, kernel_size * c, kernel_size * filters);
            let w = Param::uniform(pname("kernel"), &[*kernel_size, c, *filters], limit, 0.0, *l2, rng);
            let b = Param::constant(pname("bias"), &[*filters], 0.0);
            let pad = same_pad(*kernel_size, *padding);
            Ok((Layer::Conv1D { w, b, pad, act: *activation }, vec![out_len, *filters]))
        }
        LayerSpec::Conv2D { filters, kernel_size, padding, activation, l2 } => {
            expect_inputs(1)?;
            let s = &inputs[0];
            if s.len() != 3 {
                return Err(err(format!("expects (height, width, channels), got {s:?}")));
            }
            let [kh, kw] = *kernel_size;
            let oh = conv_out(s[0], kh, *padding).filter(|&v| v > 0);
            let ow = conv_out(s[1], kw, *padding).filter(|&v| v > 0);
            let (oh, ow) = oh
                .zip(ow)
                .ok_or_else(|| err(format!("kernel {kernel_size:?} exceeds input {s:?}")))?;
            let c = s[2];
            let limit = init_limit(*activation, kh * kw * c, kh * kw * filters);
            let w = Param::uniform(pname("kernel"), &[kh, kw, c, *filters], limit, 0.0, *l2, rng);
            let b = Param::constant(pname("bias"), &[*filters], 0.0);
            let pad = [same_pad(kh, *padding), same_pad(kw, *padding)];
            Ok((Layer::Conv2D { w, b, pad, act: *activation }, vec![oh, ow, *filters]))
        }
        LayerSpec::MaxPool1D { pool } => {
            expect_inputs(1)?;
            let s = &inputs[0];
            if s.len() != 2 || s[0] / pool == 0 {
                return Err(err(format!("cannot pool {s:?} by {pool}")));
            }
            Ok((Layer::MaxPool1D { pool: *pool, argmax: Vec::new() }, vec![s[0] / pool, s[1]]))
        }
        LayerSpec::MaxPool2D { pool } => {
            expect_inputs(1)?;
            let s = &inputs[0];
            if s.len() != 3 || s[0] / pool == 0 || s[1] / pool == 0 {
                return Err(err(format!("cannot pool {s:?} by {pool}×{pool}")));
            }
            Ok((Layer::MaxPool2D { pool: *pool, argmax: Vec::new() }, vec![s[0] / pool, s[1] / pool, s[2]]))
        }
        LayerSpec::ReLU => {
            expect_inputs(1)?;
            Ok((Layer::Relu, inputs[0].clone()))
        }
        LayerSpec::Softmax => {
            expect_inputs(1)?;
            Ok((Layer::Softmax, inputs[0].clone()))
        }
        LayerSpec::Flatten => {
            expect_inputs(1)?;
            Ok((Layer::Flatten, vec![inputs[0].iter().product()]))
        }
        LayerSpec::Dropout { rate } => {
            expect_inputs(1)?;
            Ok((Layer::Dropout { rate: *rate, mask: Vec::new() }, inputs[0].clone()))
        }
        LayerSpec::BatchNorm { momentum, eps } => {
            expect_inputs(1)?;
            let c = *inputs[0].last().expect("non-empty");
            Ok((
                Layer::BatchNorm {
                    gamma: Param::constant(pname("gamma"), &[c], 1.0),
                    beta: Param::constant(pname("beta"), &[c], 0.0),
                    running_mean: vec![0.0; c],
                    running_var: vec![1.0; c],
                    momentum: *momentum,
                    eps: *eps,
                    xhat: Vec::new(),
                    inv_std: Vec::new(),
                    batch_stats: false,
                },
                inputs[0].clone(),
            ))
        }
        LayerSpec::LayerNorm { eps } => {
            expect_inputs(1)?;
            let d = *inputs[0].last().expect("non-empty");
            Ok((
                Layer::LayerNorm {
                    gamma: Param::constant(pname("gamma"), &[d], 1.0),
                    beta: Param::constant(pname("beta"), &[d], 0.0),
                    eps: *eps,
                    xhat: Vec::new(),
                    inv_std: Vec::new(),
                },
                inputs[0].clone(),
            ))
        }
        LayerSpec::MultiHeadAttention { heads, key_dim } => {
            expect_inputs(1)?;
            let s = &inputs[0];
            if s.len() != 2 {
                return Err(err(format!("expects (sequence, features), got {s:?}")));
            }
            let d = s[1];
            let hk = heads * key_dim;
            let lim_in = glorot_limit(d, hk);
            let lim_out = glorot_limit(hk, d);
            let wq = Param::uniform(pname("query/kernel"), &[d, hk], lim_in, 0.0, 0.0, rng);
            let wk = Param::uniform(pname("key/kernel"), &[d, hk], lim_in, 0.0, 0.0, rng);
            let wv = Param::uniform(pname("value/kernel"), &[d, hk], lim_in, 0.0, 0.0, rng);
            let wo = Param::uniform(pname("output/kernel"), &[hk, d], lim_out, 0.0, 0.0, rng);
            Ok((
                Layer::Mha {
                    wq,
                    bq: Param::constant(pname("query/bias"), &[hk], 0.0),
                    wk,
                    bk: Param::constant(pname("key/bias"), &[hk], 0.0),
                    wv,
                    bv: Param::constant(pname("value/bias"), &[hk], 0.0),
                    wo,
                    bo: Param::constant(pname("output/bias"), &[d], 0.0),
                    heads: *heads,
                    key_dim: *key_dim,
                    cache: MhaCache::default(),
                },
                s.clone(),
            ))
        }
        LayerSpec::Add => {
            expect_inputs(2)?;
            if inputs[0] != inputs[1] {
                return Err(err(format!("cannot add {:?} and {:?}", inputs[0], inputs[1])));
            }
            Ok((Layer::Add, inputs[0].clone()))
        }
        LayerSpec::Concat => {
            if inputs.len() < 2 {
                return Err(err("needs at least two inputs".into()));
            }
            if let Some(s) = inputs.iter().find(|s| s.len() != 1) {
                return Err(err(format!("concatenates flat features only, got {s:?}")));
            }
            Ok((Layer::Concat, vec![inputs.iter().map(|s| s[0]).sum()]))
        }
    }
}

fn relu_inplace(v: &mut [f64]) {
    v.iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
}

fn relu_mask_grad(grad: &Tensor, out: &Tensor) -> Vec<f64> {
    grad.data()
        .iter()
        .zip(out.data())
        .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
        .collect()
}

fn with_shape(shape: &[usize], batch: usize, data: Vec<f64>) -> Tensor {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(batch);
    s.extend_from_slice(shape);
    Tensor::new(s, data).expect("layer output sized by construction")
}

/// Per-channel statistics over every axis but the last.
fn channel_moments(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in x.chunks_exact(c) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for j in 0..c {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

impl Layer {
    pub(crate) fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Dense { w, b, .. } | Layer::Conv1D { w, b, .. } | Layer::Conv2D { w, b, .. } => vec![w, b],
            Layer::BatchNorm { gamma, beta, .. } | Layer::LayerNorm { gamma, beta, .. } => vec![gamma, beta],
            Layer::Mha { wq, bq, wk, bk, wv, bv, wo, bo, .. } => vec![wq, bq, wk, bk, wv, bv, wo, bo],
            _ => Vec::new(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Dense { w, b, .. } | Layer::Conv1D { w, b, .. } | Layer::Conv2D { w, b, .. } => vec![w, b],
            Layer::BatchNorm { gamma, beta, .. } | Layer::LayerNorm { gamma, beta, .. } => vec![gamma, beta],
            Layer::Mha { wq, bq, wk, bk, wv, bv, wo, bo, .. } => vec![wq, bq, wk, bk, wv, bv, wo, bo],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state carried across batches (BatchNorm running moments).
    pub(crate) fn buffers(&self) -> Vec<&Vec<f64>> {
        match self {
            Layer::BatchNorm { running_mean, running_var, .. } => vec![running_mean, running_var],
            _ => Vec::new(),
        }
    }

    pub(crate) fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::BatchNorm { running_mean, running_var, .. } => vec![running_mean, running_var],
            _ => Vec::new(),
        }
    }

    /// `out_shape` excludes the batch axis.
    pub(crate) fn forward(
        &mut self,
        inputs: &[&Tensor],
        out_shape: &[usize],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Tensor {
        let x = inputs[0];
        let bsz = x.batch();
        match self {
            Layer::Input => x.clone(),
            Layer::Dense { w, b, act } => {
                let d_in = w.value.shape()[0];
                let units = w.value.shape()[1];
                let rows = x.len() / d_in;
                let mut out = Vec::with_capacity(rows * units);
                for _ in 0..rows {
                    out.extend_from_slice(b.value.data());
                }
                matmul_acc(x.data(), w.value.data(), &mut out, rows, d_in, units);
                if *act == Activation::Relu {
                    relu_inplace(&mut out);
                }
                with_shape(out_shape, bsz, out)
            }
            Layer::Conv1D { w, b, pad, act } => {
                let (len, c) = (x.shape()[1], x.shape()[2]);
                let (k, f) = (w.value.shape()[0], w.value.shape()[2]);
                let out_len = out_shape[0];
                let wd = w.value.data();
                let xd = x.data();
                let mut out = vec![0.0; bsz * out_len * f];
                for bi in 0..bsz {
                    for t in 0..out_len {
                        let orow = &mut out[(bi * out_len + t) * f..(bi * out_len + t + 1) * f];
                        orow.copy_from_slice(b.value.data());
                        for kk in 0..k {
                            let src = t + kk;
                            if src < *pad || src - *pad >= len {
                                continue;
                            }
                            let xrow = &xd[(bi * len + src - *pad) * c..(bi * len + src - *pad + 1) * c];
                            let wblock = &wd[kk * c * f..(kk + 1) * c * f];
                            matmul_acc(xrow, wblock, orow, 1, c, f);
                        }
                    }
                }
                if *act == Activation::Relu {
                    relu_inplace(&mut out);
                }
                with_shape(out_shape, bsz, out)
            }
            Layer::Conv2D { w, b, pad, act } => {
                let (h, wid, c) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (kh, kw, f) = (w.value.shape()[0], w.value.shape()[1], w.value.shape()[3]);
                let (oh, ow) = (out_shape[0], out_shape[1]);
                let wd = w.value.data();
                let xd = x.data();
                let mut out = vec![0.0; bsz * oh * ow * f];
                for bi in 0..bsz {
                    for i in 0..oh {
                        for j in 0..ow {
                            let o0 = ((bi * oh + i) * ow + j) * f;
                            let orow = &mut out[o0..o0 + f];
                            orow.copy_from_slice(b.value.data());
                            for di in 0..kh {
                                let si = i + di;
                                if si < pad[0] || si - pad[0] >= h {
                                    continue;
                                }
                                for dj in 0..kw {
                                    let sj = j + dj;
                                    if sj < pad[1] || sj - pad[1] >= wid {
                                        continue;
                                    }
                                    let x0 = ((bi * h + si - pad[0]) * wid + sj - pad[1]) * c;
                                    let w0 = (di * kw + dj) * c * f;
                                    matmul_acc(&xd[x0..x0 + c], &wd[w0..w0 + c * f], orow, 1, c, f);
                                }
                            }
                        }
                    }
                }
                if *act == Activation::Relu {
                    relu_inplace(&mut out);
                }
                with_shape(out_shape, bsz, out)
            }
            Layer::MaxPool1D { pool, argmax } => {
                let (len, c) = (x.shape()[1], x.shape()[2]);
                let ol = out_shape[0];
                let xd = x.data();
                let mut out = Vec::with_capacity(bsz * ol * c);
                argmax.clear();
                for bi in 0..bsz {
                    for t in 0..ol {
                        for ch in 0..c {
                            let mut best = (bi * len + t * *pool) * c + ch;
                            for p in 1..*pool {
                                let idx = (bi * len + t * *pool + p) * c + ch;
                                if xd[idx] > xd[best] {
                                    best = idx;
                                }
                            }
                            out.push(xd[best]);
                            argmax.push(best);
                        }
                    }
                }
                with_shape(out_shape, bsz, out)
            }
            Layer::MaxPool2D { pool, argmax } => {
                let (h, wid, c) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out_shape[0], out_shape[1]);
                let p = *pool;
                let xd = x.data();
                let mut out = Vec::with_capacity(bsz * oh * ow * c);
                argmax.clear();
                for bi in 0..bsz {
                    for i in 0..oh {
                        for j in 0..ow {
                            for ch in 0..c {
                                let mut best = usize::MAX;
                                for di in 0..p {
                                    for dj in 0..p {
                                        let idx = ((bi * h + i * p + di) * wid + j * p + dj) * c + ch;
                                        if best == usize::MAX || xd[idx] > xd[best] {
                                            best = idx;
                                        }
                                    }
                                }
                                out.push(xd[best]);
                                argmax.push(best);
                            }
                        }
                    }
                }
                with_shape(out_shape, bsz, out)
            }
            Layer::Relu => {
                let mut out = x.data().to_vec();
                relu_inplace(&mut out);
                with_shape(out_shape, bsz, out)
            }
            Layer::Softmax => {
                let d = *x.shape().last().expect("non-empty");
                let mut out = x.data().to_vec();
                for row in out.chunks_exact_mut(d) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= s);
                }
                with_shape(out_shape, bsz, out)
            }
            Layer::Flatten => with_shape(out_shape, bsz, x.data().to_vec()),
            Layer::Dropout { rate, mask } => {
                mask.clear();
                if !train || *rate == 0.0 {
                    return x.clone();
                }
                let keep = 1.0 / (1.0 - *rate);
                mask.extend((0..x.len()).map(|_| if rng.random::<f64>() >= *rate { keep } else { 0.0 }));
                let out = x.data().iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
                with_shape(out_shape, bsz, out)
            }
            Layer::BatchNorm { gamma, beta, running_mean, running_var, momentum, eps, xhat, inv_std, batch_stats } => {
                let c = gamma.value.len();
                let xd = x.data();
                *batch_stats = train && gamma.trainable;
                let (mean, var) = if *batch_stats {
                    let (mean, var) = channel_moments(xd, c);
                    for j in 0..c {
                        running_mean[j] = *momentum * running_mean[j] + (1.0 - *momentum) * mean[j];
                        running_var[j] = *momentum * running_var[j] + (1.0 - *momentum) * var[j];
                    }
                    (mean, var)
                } else {
                    (running_mean.clone(), running_var.clone())
                };
                *inv_std = var.iter().map(|v| 1.0 / (v + *eps).sqrt()).collect();
                xhat.clear();
                xhat.reserve(xd.len());
                let mut out = Vec::with_capacity(xd.len());
                let (g, bt) = (gamma.value.data(), beta.value.data());
                for row in xd.chunks_exact(c) {
                    for j in 0..c {
                        let h = (row[j] - mean[j]) * inv_std[j];
                        xhat.push(h);
                        out.push(g[j] * h + bt[j]);
                    }
                }
                with_shape(out_shape, bsz, out)
            }
            Layer::LayerNorm { gamma, beta, eps, xhat, inv_std } => {
                let d = gamma.value.len();
                let (g, bt) = (gamma.value.data(), beta.value.data());
                xhat.clear();
                inv_std.clear();
                let mut out = Vec::with_capacity(x.len());
                for row in x.data().chunks_exact(d) {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let is = 1.0 / (var + *eps).sqrt();
                    inv_std.push(is);
                    for j in 0..d {
                        let h = (row[j] - mean) * is;
                        xhat.push(h);
                        out.push(g[j] * h + bt[j]);
                    }
                }
                with_shape(out_shape, bsz, out)
            }
            Layer::Mha { wq, bq, wk, bk, wv, bv, wo, bo, heads, key_dim, cache } => {
                let (s, d) = (x.shape()[1], x.shape()[2]);
                let (nh, dk) = (*heads, *key_dim);
                let hk = nh * dk;
                let rows = bsz * s;
                let project = |w: &Param, b: &Param| {
                    let mut out = Vec::with_capacity(rows * hk);
                    for _ in 0..rows {
                        out.extend_from_slice(b.value.data());
                    }
                    matmul_acc(x.data(), w.value.data(), &mut out, rows, d, hk);
                    out
                };
                let q = project(wq, bq);
                let k = project(wk, bk);
                let v = project(wv, bv);
                let scale = 1.0 / (dk as f64).sqrt();
                let mut attn = vec![0.0; bsz * nh * s * s];
                let mut ctx = vec![0.0; rows * hk];
                for bi in 0..bsz {
                    for h in 0..nh {
                        let a0 = (bi * nh + h) * s * s;
                        for i in 0..s {
                            let qi = &q[(bi * s + i) * hk + h * dk..(bi * s + i) * hk + (h + 1) * dk];
                            let arow = &mut attn[a0 + i * s..a0 + (i + 1) * s];
                            for j in 0..s {
                                let kj = &k[(bi * s + j) * hk + h * dk..(bi * s + j) * hk + (h + 1) * dk];
                                arow[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                            }
                            let m = arow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let mut z = 0.0;
                            for a in arow.iter_mut() {
                                *a = (*a - m).exp();
                                z += *a;
                            }
                            arow.iter_mut().for_each(|a| *a /= z);
                            let crow = &mut ctx[(bi * s + i) * hk + h * dk..(bi * s + i) * hk + (h + 1) * dk];
                            for j in 0..s {
                                let vj = &v[(bi * s + j) * hk + h * dk..(bi * s + j) * hk + (h + 1) * dk];
                                let a = arow[j];
                                crow.iter_mut().zip(vj).for_each(|(c, vv)| *c += a * vv);
                            }
                        }
                    }
                }
                let mut out = Vec::with_capacity(rows * d);
                for _ in 0..rows {
                    out.extend_from_slice(bo.value.data());
                }
                matmul_acc(&ctx, wo.value.data(), &mut out, rows, hk, d);
                *cache = MhaCache { q, k, v, attn, ctx };
                with_shape(out_shape, bsz, out)
            }
            Layer::Add => {
                let out = x.data().iter().zip(inputs[1].data()).map(|(a, b)| a + b).collect();
                with_shape(out_shape, bsz, out)
            }
            Layer::Concat => {
                let mut out = Vec::with_capacity(bsz * out_shape[0]);
                for bi in 0..bsz {
                    for t in inputs {
                        out.extend_from_slice(t.row(bi));
                    }
                }
                with_shape(out_shape, bsz, out)
            }
        }
    }

    /// Returns one gradient per input and accumulates parameter gradients.
    /// `input_grads` set to false skips computing gradients w.r.t. inputs.
    pub(crate) fn backward(
        &mut self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        input_grads: bool,
    ) -> Vec<Tensor> {
        let x = inputs[0];
        let bsz = x.batch();
        match self {
            Layer::Input => Vec::new(),
            Layer::Dense { w, b, act } => {
                let d_in = w.value.shape()[0];
                let units = w.value.shape()[1];
                let rows = x.len() / d_in;
                let g = match act {
                    Activation::Relu => relu_mask_grad(grad, output),
                    Activation::Linear => grad.data().to_vec(),
                };
                if w.trainable {
                    matmul_tn_acc(x.data(), &g, w.grad.data_mut(), rows, d_in, units);
                }
                if b.trainable {
                    let bg = b.grad.data_mut();
                    for row in g.chunks_exact(units) {
                        bg.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
                if !input_grads {
                    return Vec::new();
                }
                let mut dx = vec![0.0; x.len()];
                matmul_nt_acc(&g, w.value.data(), &mut dx, rows, units, d_in);
                vec![Tensor::new(x.shape().to_vec(), dx).expect("sized")]
            }
            Layer::Conv1D { w, b, pad, act } => {
                let (len, c) = (x.shape()[1], x.shape()[2]);
                let (k, f) = (w.value.shape()[0], w.value.shape()[2]);
                let out_len = output.shape()[1];
                let g = match act {
                    Activation::Relu => relu_mask_grad(grad, output),
                    Activation::Linear => grad.data().to_vec(),
                };
                let xd = x.data();
                let mut dx = if input_grads { vec![0.0; x.len()] } else { Vec::new() };
                let wd = w.value.data().to_vec();
                let train_w = w.trainable;
                let wg = w.grad.data_mut();
                for bi in 0..bsz {
                    for t in 0..out_len {
                        let grow = &g[(bi * out_len + t) * f..(bi * out_len + t + 1) * f];
                        for kk in 0..k {
                            let src = t + kk;
                            if src < *pad || src - *pad >= len {
                                continue;
                            }
                            let x0 = (bi * len + src - *pad) * c;
                            let w0 = kk * c * f;
                            if train_w {
                                matmul_tn_acc(&xd[x0..x0 + c], grow, &mut wg[w0..w0 + c * f], 1, c, f);
                            }
                            if input_grads {
                                matmul_nt_acc(grow, &wd[w0..w0 + c * f], &mut dx[x0..x0 + c], 1, f, c);
                            }
                        }
                    }
                }
                if b.trainable {
                    let bg = b.grad.data_mut();
                    for row in g.chunks_exact(f) {
                        bg.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
                if !input_grads {
                    return Vec::new();
                }
                vec![Tensor::new(x.shape().to_vec(), dx).expect("sized")]
            }
            Layer::Conv2D { w, b, pad, act } => {
                let (h, wid, c) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (kh, kw, f) = (w.value.shape()[0], w.value.shape()[1], w.value.shape()[3]);
                let (oh, ow) = (output.shape()[1], output.shape()[2]);
                let g = match act {
                    Activation::Relu => relu_mask_grad(grad, output),
                    Activation::Linear => grad.data().to_vec(),
                };
                let xd = x.data();
                let mut dx = if input_grads { vec![0.0; x.len()] } else { Vec::new() };
                let wd = w.value.data().to_vec();
                let train_w = w.trainable;
                let wg = w.grad.data_mut();
                for bi in 0..bsz {
                    for i in 0..oh {
                        for j in 0..ow {
                            let o0 = ((bi * oh + i) * ow + j) * f;
                            let grow = &g[o0..o0 + f];
                            for di in 0..kh {
                                let si = i + di;
                                if si < pad[0] || si - pad[0] >= h {
                                    continue;
                                }
                                for dj in 0..kw {
                                    let sj = j + dj;
                                    if sj < pad[1] || sj - pad[1] >= wid {
                                        continue;
                                    }
                                    let x0 = ((bi * h + si - pad[0]) * wid + sj - pad[1]) * c;
                                    let w0 = (di * kw + dj) * c * f;
                                    if train_w {
                                        matmul_tn_acc(&xd[x0..x0 + c], grow, &mut wg[w0..w0 + c * f], 1, c, f);
                                    }
                                    if input_grads {
                                        matmul_nt_acc(grow, &wd[w0..w0 + c * f], &mut dx[x0..x0 + c], 1, f, c);
                                    }
                                }
                            }
                        }
                    }
                }
                if b.trainable {
                    let bg = b.grad.data_mut();
                    for row in g.chunks_exact(f) {
                        bg.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
                if !input_grads {
                    return Vec::new();
                }
                vec![Tensor::new(x.shape().to_vec(), dx).expect("sized")]
            }
            Layer::MaxPool1D { argmax, .. } | Layer::MaxPool2D { argmax, .. } => {
                let mut dx = vec![0.0; x.len()];
                for (&idx, &g) in argmax.iter().zip(grad.data()) {
                    dx[idx] += g;
                }
                vec![Tensor::new(x.shape().to_vec(), dx).expect("sized")]
            }
            Layer::Relu => {
                let dx = relu_mask_grad(grad, output);
                vec![Tensor::new(x.shape().to_vec(), dx).expect("sized")]
            }
            Layer::Softmax => {
                let d = *x.shape().last().expect("non-empty");
                let mut dx = Vec::with_capacity(x.len());
                for (y, g) in output.data().chunks_exact(d).zip(grad.data().chunks_exact(d)) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    dx.extend(y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)));
                }
                vec![Tensor::new(x.shape().to_vec(), dx).expect("sized")]
            }
            Layer::Flatten => vec![Tensor::new(x.shape().to_vec(), grad.data().to_vec()).expect("sized")],
            Layer::Dropout { mask, .. } => {
                let dx = if mask.is_empty() {
                    grad.data().to_vec()
                } else {
                    grad.data().iter().zip(mask.iter()).map(|(g, m)| g * m).collect()
                };
                vec![Tensor::new(x.shape().to_vec(), dx).expect("sized")]
            }
            Layer::BatchNorm { gamma, beta, xhat, inv_std, batch_stats, .. } => {
                let c = gamma.value.len();
                let gd = grad.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                if gamma.trainable {
                    gamma.grad.data_mut().iter_mut().zip(&dgamma).for_each(|(a, v)| *a += v);
                }
                if beta.trainable {
                    beta.grad.data_mut().iter_mut().zip(&dbeta).for_each(|(a, v)| *a += v);
                }
                if !input_grads {
                    return Vec::new();
                }
                let g = gamma.value.data();
                let m = (gd.len() / c) as f64;
                let mut dx = Vec::with_capacity(gd.len());
                for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        let v = if *batch_stats {
                            g[j] * inv_std[j] / m * (m * grow[j] - dbeta[j] - hrow[j] * dgamma[j])
                        } else {
                            g[j] * inv_std[j] * grow[j]
                        };
                        dx.push(v);
                    }
                }
                vec![Tensor::new(x.shape().to_vec(), dx).expect("sized")]
            }
            Layer::LayerNorm { gamma, beta, xhat, inv_std, .. } => {
                let d = gamma.value.len();
                let gd = grad.data();
                let g = gamma.value.data().to_vec();
                let mut dx = Vec::with_capacity(gd.len());
                let dn = d as f64;
                for (r, (grow, hrow)) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    if gamma.trainable {
                        let gg = gamma.grad.data_mut();
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                    if beta.trainable {
                        beta.grad.data_mut().iter_mut().zip(grow).for_each(|(a, v)| *a += v);
                    }
                    if input_grads {
                        let dxhat: Vec<f64> = (0..d).map(|j| grow[j] * g[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx.push(inv_std[r] / dn * (dn * dxhat[j] - s1 - hrow[j] * s2));
                        }
                    }
                }
                if !input_grads {
                    return Vec::new();
                }
                vec![Tensor::new(x.shape().to_vec(), dx).expect("sized")]
            }
            Layer::Mha { wq, bq, wk, bk, wv, bv, wo, bo, heads, key_dim, cache } => {
                let (s, d) = (x.shape()[1], x.shape()[2]);
                let (nh, dk) = (*heads, *key_dim);
                let hk = nh * dk;
                let rows = bsz * s;
                let gd = grad.data();
                let MhaCache { q, k, v, attn, ctx } = &*cache;
                if wo.trainable {
                    matmul_tn_acc(ctx, gd, wo.grad.data_mut(), rows, hk, d);
                }
                if bo.trainable {
                    for row in gd.chunks_exact(d) {
                        bo.grad.data_mut().iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
                let mut dctx = vec![0.0; rows * hk];
                matmul_nt_acc(gd, wo.value.data(), &mut dctx, rows, d, hk);
                let scale = 1.0 / (dk as f64).sqrt();
                let mut dq = vec![0.0; rows * hk];
                let mut dk_ = vec![0.0; rows * hk];
                let mut dv = vec![0.0; rows * hk];
                let mut da = vec![0.0; s];
                for bi in 0..bsz {
                    for h in 0..nh {
                        let a0 = (bi * nh + h) * s * s;
                        let off = |r: usize| (bi * s + r) * hk + h * dk;
                        for i in 0..s {
                            let arow = &attn[a0 + i * s..a0 + (i + 1) * s];
                            let dci = &dctx[off(i)..off(i) + dk];
                            for j in 0..s {
                                let vj = &v[off(j)..off(j) + dk];
                                da[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                                let dvj = &mut dv[off(j)..off(j) + dk];
                                dvj.iter_mut().zip(dci).for_each(|(o, g)| *o += arow[j] * g);
                            }
                            let dot: f64 = arow.iter().zip(&da).map(|(a, b)| a * b).sum();
                            for j in 0..s {
                                let ds = arow[j] * (da[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for t in 0..dk {
                                    dq[off(i) + t] += ds * k[off(j) + t];
                                    dk_[off(j) + t] += ds * q[off(i) + t];
                                }
                            }
                        }
                    }
                }
                let mut dx = if input_grads { vec![0.0; x.len()] } else { Vec::new() };
                for (w, b, dp) in [(wq, bq, &dq), (wk, bk, &dk_), (wv, bv, &dv)] {
                    if w.trainable {
                        matmul_tn_acc(x.data(), dp, w.grad.data_mut(), rows, d, hk);
                    }
                    if b.trainable {
                        for row in dp.chunks_exact(hk) {
                            b.grad.data_mut().iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    }
                    if input_grads {
                        matmul_nt_acc(dp, w.value.data(), &mut dx, rows, hk, d);
                    }
                }
                if !input_grads {
                    return Vec::new();
                }
                vec![Tensor::new(x.shape().to_vec(), dx).expect("sized")]
            }
            Layer::Add => vec![grad.clone(), grad.clone()],
            Layer::Concat => {
                let total = grad.row_len();
                let mut out: Vec<Vec<f64>> = inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
                for bi in 0..bsz {
                    let grow = &grad.data()[bi * total..(bi + 1) * total];
                    let mut at = 0;
                    for (o, t) in out.iter_mut().zip(inputs) {
                        let w = t.row_len();
                        o.extend_from_slice(&grow[at..at + w]);
                        at += w;
                    }
                }
                out.into_iter()
                    .zip(inputs)
                    .map(|(d, t)| Tensor::new(t.shape().to_vec(), d).expect("sized"))
                    .collect()
            }
        }
    }
}
