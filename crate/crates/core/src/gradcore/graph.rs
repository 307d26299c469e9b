use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::gemm;
use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Normalisation epsilon for layer and batch normalisation.
pub const NORM_EPS: f64 = 1e-5;
/// Additive logit used to exclude attention entries.
pub const MASK_SENTINEL: f64 = -1e30;
/// Running-statistics momentum for batch normalisation.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    MulConst { a: Var, keep: Tensor },
    Elu { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Reshape { a: Var },
    SplitHeads { a: Var, heads: usize },
    MergeHeads { a: Var, heads: usize },
    Expand { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    L2NormalizeRows { a: Var, norms: Vec<f64> },
    BceWithLogits { x: Var, targets: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Bmm { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MulConst { .. } => "mul_const",
            Op::Elu { .. } => "elu",
            Op::Dropout { .. } => "dropout",
            Op::Softmax { .. } => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Reshape { .. } => "reshape",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Expand { .. } => "expand",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L2NormalizeRows { .. } => "l2_normalize",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// A recorded forward computation that can be differentiated in reverse.
///
/// Every operation evaluates eagerly, checks its output for non-finite
/// values and appends a node to the tape. [`Graph::backward`] then walks the
/// tape from a scalar output to every node that requires a gradient.
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    dropout_enabled: bool,
    dropout_used: bool,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(String, Tensor)>,
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            dropout_enabled: mode == Mode::Train,
            dropout_used: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }

    /// Train-mode graph (batch statistics) with dropout switched off.
    pub fn deterministic_train() -> Self {
        let mut g = Self::new(Mode::Train, 0);
        g.dropout_enabled = false;
        g
    }

    pub fn with_dropout(mut self, enabled: bool) -> Self {
        self.dropout_enabled = enabled && self.mode == Mode::Train;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// True when a dropout op with positive rate ran with dropout enabled.
    pub fn used_dropout(&self) -> bool {
        self.dropout_used
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Running-statistic updates produced by train-mode batch normalisation.
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf holding a copy of parameter `name`; trainable entries are
    /// reported by name from [`Gradients::by_param`].
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let entry = params
            .entry(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        let v = self.push(entry.value.clone(), Op::Leaf, entry.trainable)?;
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    /// `x·w + b` over the last axis of `x`; `w` is `in × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::Shape(format!("linear: x {xs:?} with w {ws:?}")));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::Shape(format!("linear: bias {:?} for out {dout}", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / din.max(1);
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in out.chunks_exact_mut(dout) {
                r.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg)
    }

    /// Batched matrix product of `[B, m, k]` with `[B, k, n]`, or with
    /// `[B, n, k]` transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("bmm: {sa:?} with {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::Shape(format!("bmm: {sa:?} with {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                trans_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![batch, m, n], out)?, Op::Bmm { a, b, trans_b }, rg)
    }

    /// Elementwise `a + b`, where the shape of `b` equals the shape of `a` or
    /// a trailing suffix of it (broadcast over the leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!("add: {sa:?} + {sb:?}")));
        }
        let inner = self.value(b).len();
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for chunk in out.data_mut().chunks_exact_mut(inner.max(1)) {
            for (o, v) in chunk.iter_mut().zip(bd) {
                *o += v;
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("mul: {:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(&bd) {
            *o *= v;
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, factor }, rg)
    }

    /// Elementwise product with a constant whose shape is a suffix of `a`'s.
    pub fn mul_const(&mut self, a: Var, keep: Tensor) -> Result<Var> {
        let sa = self.shape(a);
        let sk = keep.shape();
        if sk.len() > sa.len() || sa[sa.len() - sk.len()..] != *sk {
            return Err(Error::Shape(format!("mul_const: {sa:?} * {sk:?}")));
        }
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_exact_mut(keep.len().max(1)) {
            for (o, k) in chunk.iter_mut().zip(keep.data()) {
                *o *= k;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::MulConst { a, keep }, rg)
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(elu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Elu { a }, rg)
    }

    /// Inverted dropout; identity in eval mode or when dropout is disabled.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        if !self.dropout_enabled || rate == 0.0 {
            return Ok(a);
        }
        self.dropout_used = true;
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut out = self.value(a).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Dropout { a, mask }, rg)
    }

    /// Softmax over the last axis after adding `mask` (shape `[m, n]`,
    /// broadcast over leading axes). Entries masked with
    /// [`MASK_SENTINEL`] receive exactly zero weight.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let n = *sa.last().ok_or_else(|| Error::Shape("softmax on scalar".into()))?;
        if let Some(m) = mask {
            if m.rank() != 2 || sa.len() < 2 || m.shape() != &sa[sa.len() - 2..] {
                return Err(Error::Shape(format!("softmax mask {:?} for {sa:?}", m.shape())));
            }
        }
        let mut out = self.value(a).clone();
        let block = mask.map(|m| m.len()).unwrap_or(n);
        for chunk in out.data_mut().chunks_exact_mut(block) {
            if let Some(m) = mask {
                for (o, v) in chunk.iter_mut().zip(m.data()) {
                    *o += v;
                }
            }
            for row in chunk.chunks_exact_mut(n) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax { a }, rg)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!("layer_norm: feature dim {d}")));
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = inv;
            for (h, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * g[i % d] + b[i % d])
            .collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            rg,
        )
    }

    /// Batch normalisation of `[B, F]` over the batch axis. Train mode uses
    /// batch statistics and records running-statistic updates under
    /// `{key}.running_mean` / `{key}.running_var`; eval mode reads them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        params: &ParameterSet,
        key: &str,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Shape(format!("batch_norm expects [B, F], got {sx:?}")));
        }
        let (bsz, f) = (sx[0], sx[1]);
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::Shape(format!("batch_norm: feature dim {f}")));
        }
        let mean_key = format!("{key}.running_mean");
        let var_key = format!("{key}.running_var");
        let xv = self.value(x).data().to_vec();
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; f];
            for r in xv.chunks_exact(f) {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= bsz as f64);
            let mut var = vec![0.0; f];
            for r in xv.chunks_exact(f) {
                for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= bsz as f64);
            let rm = params.get(&mean_key)?;
            let rv = params.get(&var_key)?;
            let unbias = if bsz > 1 { bsz as f64 / (bsz - 1) as f64 } else { 1.0 };
            let new_mean: Vec<f64> = rm
                .data()
                .iter()
                .zip(&mean)
                .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                .collect();
            let new_var: Vec<f64> = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias)
                .collect();
            self.buffer_updates.push((mean_key, Tensor::new(vec![f], new_mean)?));
            self.buffer_updates.push((var_key, Tensor::new(vec![f], new_var)?));
            (mean, var)
        } else {
            (
                params.get(&mean_key)?.data().to_vec(),
                params.get(&var_key)?.data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let xhat: Vec<f64> = xv
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % f]) * inv_std[i % f])
            .collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * g[i % f] + b[i % f])
            .collect();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::new(sx, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape { a }, rg)
    }

    /// `[B, n, H·dh]` to `[B·H, n, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::Shape(format!("split_heads({heads}) of {s:?}")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for i in 0..n {
                for h in 0..heads {
                    let from = (bi * n + i) * d + h * dh;
                    let to = ((bi * heads + h) * n + i) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![b * heads, n, dh], out)?, Op::SplitHeads { a, heads }, rg)
    }

    /// `[B·H, n, dh]` to `[B, n, H·dh]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(Error::Shape(format!("merge_heads({heads}) of {s:?}")));
        }
        let (bh, n, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = dh * heads;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for i in 0..n {
                for h in 0..heads {
                    let to = (bi * n + i) * d + h * dh;
                    let from = ((bi * heads + h) * n + i) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![b, n, d], out)?, Op::MergeHeads { a, heads }, rg)
    }

    /// Repeats `a` along a new leading axis of size `batch`.
    pub fn expand(&mut self, a: Var, batch: usize) -> Result<Var> {
        let src = self.value(a);
        let mut shape = vec![batch];
        shape.extend_from_slice(src.shape());
        let mut out = Vec::with_capacity(src.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(src.data());
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Expand { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Divides every row (last axis) by its Euclidean norm. A zero row is an
    /// error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(v.len() / d.max(1));
        for row in out.data_mut().chunks_exact_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::NonFinite { op: "l2_normalize" });
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::L2NormalizeRows { a, norms }, rg)
    }

    /// Mean binary cross-entropy between logits `x` and targets in `{0, 1}`,
    /// `max(x,0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, x: Var, targets: Vec<f64>) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != targets.len() || xv.is_empty() {
            return Err(Error::Shape(format!(
                "bce: {} logits, {} targets",
                xv.len(),
                targets.len()
            )));
        }
        let total: f64 = xv
            .iter()
            .zip(&targets)
            .map(|(&x, &y)| bce_logit(x, y))
            .sum();
        let loss = total / xv.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(loss), Op::BceWithLogits { x, targets }, rg)
    }

    /// Mean cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::Shape(format!("cross_entropy: {s:?} with {} labels", labels.len())));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} with {c} classes")));
        }
        let lv = self.value(logits).data();
        let total: f64 = lv
            .chunks_exact(c)
            .zip(labels)
            .map(|(row, &y)| log_sum_exp(row) - row[y])
            .sum();
        let loss = total / labels.len() as f64;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            rg,
        )
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.backward_with(output, Tensor::scalar(1.0))
    }

    /// Reverse pass seeded with `upstream`, which must match `output`'s shape.
    pub fn backward_with(&self, output: Var, upstream: Tensor) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Precondition(
                "backward called before the forward pass recorded this output".into(),
            ));
        }
        let out_len = self.value(output).len();
        if upstream.len() != out_len {
            return Err(Error::Shape(format!(
                "upstream gradient has {} values for output of {out_len}",
                upstream.len()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(upstream.reshaped(self.value(output).shape())?);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let mut by_param: BTreeMap<String, Tensor> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(name), true) = (&node.param, node.requires_grad) {
                let g = grads[idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match by_param.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        by_param.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(Gradients { grads, by_param })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / din.max(1);
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * din];
                    gemm(rows, dout, din, gd, false, wv.data(), true, 0.0, &mut dx);
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, rows, dout, xv.data(), true, gd, false, 0.0, &mut dw);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![0.0; dout];
                    for r in gd.chunks_exact(dout) {
                        for (d, v) in db.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if self.needs(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        // dA = dC·Bᵀ (B is k×n) or dC·B (B stored n×k).
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..],
                            false,
                            &bv.data()[i * k * n..],
                            !trans_b,
                            0.0,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        if *trans_b {
                            // dB (n×k) = dCᵀ·A
                            gemm(
                                n,
                                m,
                                k,
                                &gd[i * m * n..],
                                true,
                                &av.data()[i * m * k..],
                                false,
                                0.0,
                                &mut db[i * k * n..(i + 1) * k * n],
                            );
                        } else {
                            // dB (k×n) = Aᵀ·dC
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[i * m * k..],
                                true,
                                &gd[i * m * n..],
                                false,
                                0.0,
                                &mut db[i * k * n..(i + 1) * k * n],
                            );
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gd.to_vec());
                }
                if self.needs(*b) {
                    let inner = self.value(*b).len();
                    let mut db = vec![0.0; inner];
                    for chunk in gd.chunks_exact(inner.max(1)) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(g, v)| g * v).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(g, v)| g * v).collect());
                }
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * factor).collect());
            }
            Op::MulConst { a, keep } => {
                let k = keep.data();
                let da = gd
                    .chunks_exact(k.len().max(1))
                    .flat_map(|c| c.iter().zip(k).map(|(g, m)| g * m))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Elu { a } => {
                let da = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .zip(node.value.data())
                    .map(|((g, &x), &y)| if x > 0.0 { *g } else { g * (y + 1.0) })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Dropout { a, mask } => {
                self.accumulate(grads, *a, gd.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::Softmax { a } => {
                let n = node.value.last_dim();
                let mut da = vec![0.0; gd.len()];
                for ((dr, gr), yr) in da
                    .chunks_exact_mut(n)
                    .zip(gd.chunks_exact(n))
                    .zip(node.value.data().chunks_exact(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = y * (g - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, hr) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    if self.needs(*gamma) {
                        self.accumulate(grads, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        self.accumulate(grads, *beta, db);
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let dn = d as f64;
                    for (r, ((dxr, gr), hr)) in dx
                        .chunks_exact_mut(d)
                        .zip(gd.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dxr[j] = inv_std[r] / dn * (dn * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let f = node.value.last_dim();
                let bsz = gd.len() / f;
                let gam = self.value(*gamma).data();
                let mut dg = vec![0.0; f];
                let mut db = vec![0.0; f];
                for (gr, hr) in gd.chunks_exact(f).zip(xhat.chunks_exact(f)) {
                    for j in 0..f {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let nb = bsz as f64;
                    for r in 0..bsz {
                        for j in 0..f {
                            let i = r * f + j;
                            dx[i] = if *batch_stats {
                                gam[j] * inv_std[j] / nb * (nb * gd[i] - db[j] - xhat[i] * dg[j])
                            } else {
                                gd[i] * gam[j] * inv_std[j]
                            };
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, db);
                }
            }
            Op::Reshape { a } => self.accumulate(grads, *a, gd.to_vec()),
            Op::SplitHeads { a, heads } => {
                let s = self.shape(*a);
                let (b, n, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let mut da = vec![0.0; gd.len()];
                for bi in 0..b {
                    for i in 0..n {
                        for h in 0..*heads {
                            let to = (bi * n + i) * d + h * dh;
                            let from = ((bi * heads + h) * n + i) * dh;
                            da[to..to + dh].copy_from_slice(&gd[from..from + dh]);
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::MergeHeads { a, heads } => {
                let s = self.shape(*a);
                let (bh, n, dh) = (s[0], s[1], s[2]);
                let d = dh * heads;
                let mut da = vec![0.0; gd.len()];
                for bi in 0..bh / heads {
                    for i in 0..n {
                        for h in 0..*heads {
                            let from = (bi * n + i) * d + h * dh;
                            let to = ((bi * heads + h) * n + i) * dh;
                            da[to..to + dh].copy_from_slice(&gd[from..from + dh]);
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Expand { a } => {
                let inner = self.value(*a).len();
                let mut da = vec![0.0; inner];
                for chunk in gd.chunks_exact(inner.max(1)) {
                    for (d, v) in da.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::L2NormalizeRows { a, norms } => {
                let d = node.value.last_dim();
                let mut da = vec![0.0; gd.len()];
                for (r, ((dr, gr), yr)) in da
                    .chunks_exact_mut(d)
                    .zip(gd.chunks_exact(d))
                    .zip(node.value.data().chunks_exact(d))
                    .enumerate()
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = (g - y * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::BceWithLogits { x, targets } => {
                let n = targets.len() as f64;
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| gd[0] * (sigmoid(x) - y) / n)
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels } => {
                let c = self.value(*logits).last_dim();
                let n = labels.len() as f64;
                let mut dl = self.value(*logits).data().to_vec();
                for (row, &y) in dl.chunks_exact_mut(c).zip(labels) {
                    softmax_in_place(row);
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gd[0] / n);
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        let shape = self.nodes[v.0].value.shape();
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape"));
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    by_param: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of trainable parameters, summed over every use.
    pub fn by_param(&self) -> &BTreeMap<String, Tensor> {
        &self.by_param
    }

    pub fn into_param_grads(self) -> BTreeMap<String, Tensor> {
        self.by_param
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x,0) − x·y + ln(1 + e^{−|x|})`.
pub fn bce_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax of one row in place, shifted by the row maximum.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
