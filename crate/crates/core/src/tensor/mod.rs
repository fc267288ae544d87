//! Minimal reverse-mode differentiation over dense f64 tensors.
//!
//! The op set is exactly what the modular-arithmetic transformer needs:
//! embedding gathers, affine maps, layer norm, exact GELU, unmasked
//! multi-head attention, row selection and mean cross-entropy. Parameters
//! enter the tape as slices of a flat [`ParamVector`] and gradients come
//! back in the same flat layout.
//!
//! ```
//! use std::sync::Arc;
//! use grokgeom::tensor::{value_and_grad, Layout, ParamVector};
//!
//! let mut layout = Layout::new();
//! let w = layout.push("w", vec![3]);
//! let theta = ParamVector::from_values(Arc::new(layout), vec![1.0, -2.0, 0.5]).unwrap();
//! let (loss, grad) = value_and_grad(&theta, |tape, theta| {
//!     let x = tape.param(theta, w);
//!     let sq = tape.mul(x, x)?;
//!     tape.sum(sq)
//! })
//! .unwrap();
//! assert_eq!(loss, 5.25);
//! assert_eq!(grad.values(), &[2.0, -4.0, 1.0]);
//! ```

pub mod kernels;
mod params;

pub use params::{Layout, ParamEntry, ParamVector};

use crate::error::{Error, Result};
use kernels::{gelu, gelu_grad, matmul_nn, matmul_nt, matmul_tn, softmax_row};

/// Dense row-major tensor of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Length of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols()
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param {
        offset: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        qkv: Var,
        n_heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
    SelectRows {
        x: Var,
        period: usize,
        offset: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_len: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Copies parameter block `index` of `theta` onto the tape.
    pub fn param(&mut self, theta: &ParamVector, index: usize) -> Var {
        self.param_len = self.param_len.max(theta.len());
        let entry = theta.layout().entry(index);
        let t = Tensor::from_parts(entry.shape.clone(), theta.block(index).to_vec());
        self.push(t, Op::Param { offset: entry.offset })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::Shape(format!("add {:?} + {:?}", va.shape, vb.shape)));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(va.shape.clone(), data);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::Shape(format!("mul {:?} * {:?}", va.shape, vb.shape)));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(va.shape.clone(), data);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape.len() != 2 {
            return Err(Error::Shape(format!("gather table must be 2-D, got {:?}", t.shape)));
        }
        let (n_rows, d) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n_rows {
                return Err(Error::TokenOutOfRange { token: id, p: n_rows });
            }
            data.extend_from_slice(&t.data[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Affine map `x Wᵀ + b` with `W` stored `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.shape.len() != 2 || vx.cols() != vw.shape[1] {
            return Err(Error::Shape(format!("linear x {:?} · W {:?}ᵀ", vx.shape, vw.shape)));
        }
        let (n, k, m) = (vx.rows(), vx.cols(), vw.shape[0]);
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape != [m] {
                return Err(Error::Shape(format!("bias {:?} for {} outputs", vb.shape, m)));
            }
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(&vb.data);
            }
        }
        matmul_nt(&vx.data, &vw.data, &mut out, n, k, m, b.is_some());
        let mut shape = vx.shape.clone();
        *shape.last_mut().unwrap() = m;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }))
    }

    /// Normalizes each row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.shape != [d] || vb.shape != [d] {
            return Err(Error::Shape(format!(
                "layer_norm over {} features with gain {:?}, bias {:?}",
                d, vg.shape, vb.shape
            )));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &vx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data[j] + vb.data[j];
            }
        }
        let t = Tensor::from_parts(vx.shape.clone(), out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data.iter().map(|&v| gelu(v)).collect();
        let t = Tensor::from_parts(vx.shape.clone(), data);
        Ok(self.push(t, Op::Gelu(x)))
    }

    /// Unmasked scaled dot-product attention over a fused projection.
    ///
    /// `qkv` has shape `(batch·seq_len, 3·d)` with Q, K, V in consecutive
    /// column blocks; the result is `(batch·seq_len, d)` with heads
    /// concatenated along the last axis.
    pub fn attention(&mut self, qkv: Var, n_heads: usize, seq_len: usize) -> Result<Var> {
        let v = self.value(qkv);
        let width = v.cols();
        if !width.is_multiple_of(3) {
            return Err(Error::Shape(format!("fused qkv width {} not divisible by 3", width)));
        }
        let d = width / 3;
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::HeadsDoNotDivide { d_model: d, n_heads });
        }
        let rows = v.rows();
        if seq_len == 0 || !rows.is_multiple_of(seq_len) {
            return Err(Error::Shape(format!(
                "{} rows do not split into sequences of {}",
                rows, seq_len
            )));
        }
        let batch = rows / seq_len;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let data = &v.data;
        let mut probs = vec![0.0; batch * n_heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..n_heads {
                let col = h * dh;
                for i in 0..seq_len {
                    let qrow = (b * seq_len + i) * width;
                    let q = &data[qrow + col..qrow + col + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = (b * seq_len + j) * width + d;
                        *s = kernels::dot(q, &data[krow + col..krow + col + dh]) * scale;
                    }
                    softmax_row(&mut scores);
                    let p_base = ((b * n_heads + h) * seq_len + i) * seq_len;
                    probs[p_base..p_base + seq_len].copy_from_slice(&scores);
                    let orow = (b * seq_len + i) * d + col;
                    let o = &mut out[orow..orow + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let vrow = (b * seq_len + j) * width + 2 * d + col;
                        for (ov, vv) in o.iter_mut().zip(&data[vrow..vrow + dh]) {
                            *ov += p * vv;
                        }
                    }
                }
            }
        }
        let mut shape = v.shape.clone();
        *shape.last_mut().unwrap() = d;
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(
            t,
            Op::Attention {
                qkv,
                n_heads,
                seq_len,
                probs,
            },
        ))
    }

    /// Keeps rows `offset, offset + period, offset + 2·period, …` of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, period: usize, offset: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape.len() != 2 || period == 0 || offset >= period || !vx.shape[0].is_multiple_of(period) {
            return Err(Error::Shape(format!(
                "select_rows(period {}, offset {}) on {:?}",
                period, offset, vx.shape
            )));
        }
        let (n, d) = (vx.shape[0] / period, vx.shape[1]);
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            let src = (r * period + offset) * d;
            data.extend_from_slice(&vx.data[src..src + d]);
        }
        let t = Tensor::from_parts(vec![n, d], data);
        Ok(self.push(t, Op::SelectRows { x, period, offset }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (n, c) = (vl.rows(), vl.cols());
        if targets.len() != n || n == 0 {
            return Err(Error::Shape(format!("{} targets for {} logit rows", targets.len(), n)));
        }
        let mut probs = vl.data.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::TargetOutOfRange { target: t, classes: c });
            }
            let row = &mut probs[r * c..(r + 1) * c];
            let z = row[t];
            let lse = softmax_row(row);
            total += lse - z;
        }
        let loss = total / n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from scalar `root`; returns the gradient in flat
    /// parameter layout (zeros where a parameter was not used).
    pub fn backward(&self, root: Var) -> Result<Vec<f64>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut flat = vec![0.0; self.param_len];

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (f, gv) in flat[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *f += gv;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; self.value(*a).len()];
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Gather { table, ids } => {
                    let vt = self.value(*table);
                    let d = vt.cols();
                    let gt = slot(&mut grads, *table, vt.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for (dst, src) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *dst += src;
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let (n, k, m) = (vx.rows(), vx.cols(), vw.shape[0]);
                    if let Some(b) = b {
                        let gb = slot(&mut grads, *b, m);
                        for row in g.chunks_exact(m) {
                            for (dst, src) in gb.iter_mut().zip(row) {
                                *dst += src;
                            }
                        }
                    }
                    {
                        let gw = slot(&mut grads, *w, m * k);
                        matmul_tn(&g, &vx.data, gw, m, n, k, true);
                    }
                    if self.wants_grad(*x) {
                        let gx = slot(&mut grads, *x, n * k);
                        matmul_nn(&g, &vw.data, gx, n, m, k, true);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = self.value(*x).cols();
                    let vg = &self.value(*gain).data;
                    let rows = rstd.len();
                    {
                        let gg = slot(&mut grads, *gain, d);
                        for r in 0..rows {
                            for j in 0..d {
                                gg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    {
                        let gb = slot(&mut grads, *bias, d);
                        for row in g.chunks_exact(d) {
                            for (dst, src) in gb.iter_mut().zip(row) {
                                *dst += src;
                            }
                        }
                    }
                    if self.wants_grad(*x) {
                        let gx = slot(&mut grads, *x, rows * d);
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut mean_dx = 0.0;
                            let mut mean_dxh = 0.0;
                            for j in 0..d {
                                dxhat[j] = gr[j] * vg[j];
                                mean_dx += dxhat[j];
                                mean_dxh += dxhat[j] * hr[j];
                            }
                            mean_dx /= d as f64;
                            mean_dxh /= d as f64;
                            for j in 0..d {
                                gx[r * d + j] += rstd[r] * (dxhat[j] - mean_dx - hr[j] * mean_dxh);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let vx = &self.value(*x).data;
                    let gx: Vec<f64> = g.iter().zip(vx).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Attention {
                    qkv,
                    n_heads,
                    seq_len,
                    probs,
                } => {
                    let vq = self.value(*qkv);
                    if self.wants_grad(*qkv) {
                        let width = vq.cols();
                        let d = width / 3;
                        let (n_heads, seq_len) = (*n_heads, *seq_len);
                        let dh = d / n_heads;
                        let scale = 1.0 / (dh as f64).sqrt();
                        let batch = vq.rows() / seq_len;
                        let data = &vq.data;
                        let gq = slot(&mut grads, *qkv, vq.len());
                        let mut dp = vec![0.0; seq_len];
                        for b in 0..batch {
                            for h in 0..n_heads {
                                let col = h * dh;
                                for i in 0..seq_len {
                                    let go_off = (b * seq_len + i) * d + col;
                                    let go = &g[go_off..go_off + dh];
                                    let p_base = ((b * n_heads + h) * seq_len + i) * seq_len;
                                    let p = &probs[p_base..p_base + seq_len];
                                    // dV_j += p_ij dO_i ; dp_ij = dO_i · V_j
                                    for j in 0..seq_len {
                                        let vrow = (b * seq_len + j) * width + 2 * d + col;
                                        dp[j] = kernels::dot(go, &data[vrow..vrow + dh]);
                                        for (dst, src) in gq[vrow..vrow + dh].iter_mut().zip(go) {
                                            *dst += p[j] * src;
                                        }
                                    }
                                    let pd: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                                    let qrow = (b * seq_len + i) * width + col;
                                    for j in 0..seq_len {
                                        let ds = p[j] * (dp[j] - pd) * scale;
                                        if ds == 0.0 {
                                            continue;
                                        }
                                        let krow = (b * seq_len + j) * width + d + col;
                                        for t in 0..dh {
                                            gq[qrow + t] += ds * data[krow + t];
                                            gq[krow + t] += ds * data[qrow + t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::SelectRows { x, period, offset } => {
                    let vx = self.value(*x);
                    let d = vx.cols();
                    let gx = slot(&mut grads, *x, vx.len());
                    for (r, row) in g.chunks_exact(d).enumerate() {
                        let dst = (r * period + offset) * d;
                        for (a, b) in gx[dst..dst + d].iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let c = self.value(*logits).cols();
                    let n = targets.len();
                    let s = g[0] / n as f64;
                    let gl = slot(&mut grads, *logits, n * c);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(flat)
    }

    fn wants_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Input)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Runs `loss_fn` on a fresh tape and returns the loss with its full flat
/// gradient. `theta` is not modified. A non-finite loss is an error.
pub fn value_and_grad<F>(theta: &ParamVector, loss_fn: F) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Tape, &ParamVector) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.param_len = theta.len();
    let root = loss_fn(&mut tape, theta)?;
    let loss = tape.value(root).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss}")));
    }
    let grad = tape.backward(root)?;
    Ok((loss, ParamVector::from_values(theta.layout().clone(), grad)?))
}

/// Standalone multi-head attention layer: fused in-projection, attention,
/// output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    in_proj: (Var, Option<Var>),
    out_proj: (Var, Option<Var>),
    n_heads: usize,
    seq_len: usize,
) -> Result<Var> {
    let d = tape.value(x).cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::HeadsDoNotDivide { d_model: d, n_heads });
    }
    let qkv = tape.linear(x, in_proj.0, in_proj.1)?;
    let a = tape.attention(qkv, n_heads, seq_len)?;
    tape.linear(a, out_proj.0, out_proj.1)
}
