//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes only reference earlier nodes, so a
//! reverse sweep over the node list is a valid topological order.

use std::collections::{BTreeMap, HashMap};

use super::params::ParamStore;
use super::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the input `x` and the already computed output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
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

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Act(Var, Activation),
    Cos(Var),
    Sin(Var),
    Softmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    PoolMeanStd {
        x: Var,
        group: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum(Var, Vec<f64>),
    AttnPool {
        weights: Var,
        values: Var,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    StackSteps(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-feature variance.
    pub var_unbiased: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-7;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    buffer_updates: Vec<(String, Tensor)>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn matrix_dims(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "{op}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a trainable entry of `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds a non-trainable entry of `store` (running statistics).
    pub fn buffer(&mut self, store: &ParamStore, name: &str) -> Result<Tensor> {
        Ok(store.get(name)?.clone())
    }

    pub fn record_buffer_update(&mut self, name: String, value: Tensor) {
        self.buffer_updates.push((name, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, m) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), ng))
    }

    /// Adds a bias vector of width `m` to every row of an `n×m` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = matrix_dims(self.value(a), "add_row")?;
        if self.value(bias).len() != m {
            return Err(shape_err("add_row", self.value(a).shape(), self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::AddRow(a, bias), ng))
    }

    /// `input[B×Din] · weight[Din×Dout] + bias[Dout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (_, din) = matrix_dims(self.value(input), "linear")?;
        let wshape = self.value(weight).shape().to_vec();
        if wshape.len() != 2 || wshape[0] != din {
            return Err(Error::Shape(format!(
                "linear: input shape {:?} does not conform to weight shape {wshape:?}",
                self.value(input).shape()
            )));
        }
        if self.value(bias).len() != wshape[1] {
            return Err(Error::Shape(format!(
                "linear: bias shape {:?} does not conform to weight shape {wshape:?}",
                self.value(bias).shape()
            )));
        }
        let xw = self.matmul(input, weight)?;
        self.add_row(xw, bias)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `scale·a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| scale * x + shift).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Affine(a, scale), ng)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| kind.apply(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Act(a, kind), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.cos()).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Cos(a), ng)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.sin()).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Sin(a), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (_, cols) = t.as_matrix();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row, None);
        }
        let out = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Softmax over the last axis restricted to entries where `mask` is true.
    /// Masked entries receive exactly zero weight. Every row needs at least one
    /// valid entry.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(Error::Shape(format!(
                "masked_softmax: mask of length {} for shape {:?}",
                mask.len(),
                t.shape()
            )));
        }
        let (_, cols) = t.as_matrix();
        let mut out = t.data().to_vec();
        for (row, m) in out.chunks_mut(cols).zip(mask.chunks(cols)) {
            if !m.iter().any(|&v| v) {
                return Err(Error::InvalidInput("masked_softmax: row with no valid entry".into()));
            }
            softmax_in_place(row, Some(m));
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let ng = self.ng(a);
        // Masked outputs are constant zero; the softmax backward formula gives
        // them zero gradient because their probability is zero.
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    /// Batch normalization of an `N×D` matrix with per-feature statistics.
    ///
    /// With `stats = None` the batch statistics are used (training mode) and
    /// returned; otherwise the supplied running mean and variance are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, d) = matrix_dims(self.value(x), "batch_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err("batch_norm", self.value(x).shape(), self.value(gamma).shape()));
        }
        let xs = self.value(x).data();
        let (mean, var, stats) = match running {
            None => {
                if n < 2 {
                    return Err(Error::InvalidInput(format!(
                        "batch_norm: training mode needs at least 2 rows, got {n}"
                    )));
                }
                let mut mean = vec![0.0; d];
                for row in xs.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for row in xs.chunks(d) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased = var.iter().map(|s| s / (n - 1) as f64).collect();
                var.iter_mut().for_each(|s| *s /= n as f64);
                let stats = BatchStats { mean: mean.clone(), var_unbiased: unbiased };
                (mean, var, Some(stats))
            }
            Some((m, v)) => {
                if m.len() != d || v.len() != d {
                    return Err(Error::Shape(format!(
                        "batch_norm: running statistics of width {} for {d} features",
                        m.len()
                    )));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for (i, row) in xs.chunks(d).enumerate() {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let batch_stats = stats.is_some();
        let v = self.push(
            Tensor::new(vec![n, d], out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            ng,
        );
        Ok((v, stats))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero parts".into()))?;
        let (n, _) = matrix_dims(self.value(*first), "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims(self.value(p), "concat")?;
            if r != n {
                return Err(shape_err("concat", self.value(*first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::Concat(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = matrix_dims(self.value(a), "slice_cols")?;
        if len == 0 || start + len > m {
            return Err(Error::Shape(format!(
                "slice_cols: columns {start}..{} out of {m}",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for row in src.chunks(m) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Mean and population standard deviation over consecutive groups of
    /// `group` rows: `[G·group × F] → [G × 2F]`, laid out as `[mean ‖ std]`.
    pub fn pool_mean_std(&mut self, a: Var, group: usize) -> Result<Var> {
        let (n, f) = matrix_dims(self.value(a), "pool_mean_std")?;
        if group == 0 || n % group != 0 {
            return Err(Error::Shape(format!(
                "pool_mean_std: {n} rows not divisible into groups of {group}"
            )));
        }
        let g = n / group;
        let src = self.value(a).data();
        let mut out = vec![0.0; g * 2 * f];
        let mut buf = vec![0.0; group];
        for gi in 0..g {
            let block = &src[gi * group * f..(gi + 1) * group * f];
            let (mean, std) = out[gi * 2 * f..(gi + 1) * 2 * f].split_at_mut(f);
            for j in 0..f {
                buf.iter_mut().zip(block.chunks(f)).for_each(|(b, row)| *b = row[j]);
                // Identical members pool to their exact value with zero spread.
                let m = if buf.iter().all(|&v| v == buf[0]) {
                    buf[0]
                } else {
                    sorted_sum(&mut buf) / group as f64
                };
                buf.iter_mut().zip(block.chunks(f)).for_each(|(b, row)| *b = (row[j] - m) * (row[j] - m));
                mean[j] = m;
                std[j] = (sorted_sum(&mut buf) / group as f64).sqrt();
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![g, 2 * f], out)?, Op::PoolMeanStd { x: a, group }, ng))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = matrix_dims(self.value(logits), "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "cross_entropy: {} labels for {b} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidInput(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
            softmax_in_place(row, None);
        }
        loss /= b as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            ng,
        ))
    }

    /// `Σ weights ⊙ a`, a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} weights for shape {:?}",
                weights.len(),
                self.value(a).shape()
            )));
        }
        let s = self.value(a).data().iter().zip(&weights).map(|(x, w)| x * w).sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.weighted_sum(a, vec![1.0; n]).expect("matching length")
    }

    /// Attention pooling: `weights[B×T]`, `values[(B·T)×F]` → `[B×F]` with
    /// `out[b] = Σ_t weights[b,t]·values[b·T+t]`. Sums are independent of the
    /// order of the time axis.
    pub fn attn_pool(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (b, t) = matrix_dims(self.value(weights), "attn_pool")?;
        let (n, f) = matrix_dims(self.value(values), "attn_pool")?;
        if n != b * t {
            return Err(shape_err("attn_pool", self.value(weights).shape(), self.value(values).shape()));
        }
        let w = self.value(weights).data();
        let v = self.value(values).data();
        let mut out = vec![0.0; b * f];
        let mut buf = Vec::with_capacity(t);
        for bi in 0..b {
            for j in 0..f {
                buf.clear();
                for ti in 0..t {
                    let a = w[bi * t + ti];
                    if a != 0.0 {
                        buf.push(a * v[(bi * t + ti) * f + j]);
                    }
                }
                out[bi * f + j] = sorted_sum(&mut buf);
            }
        }
        let ng = self.ng(weights) || self.ng(values);
        Ok(self.push(Tensor::new(vec![b, f], out)?, Op::AttnPool { weights, values }, ng))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, f) = matrix_dims(self.value(a), "gather_rows")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::Shape(format!("gather_rows: bad row index for {n} rows")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            out.extend_from_slice(&src[r * f..(r + 1) * f]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![rows.len(), f], out)?, Op::GatherRows(a, rows.to_vec()), ng))
    }

    /// Places row `i` of `a` at row `rows[i]` of a zero matrix with `total` rows.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], total: usize) -> Result<Var> {
        let (n, f) = matrix_dims(self.value(a), "scatter_rows")?;
        if rows.len() != n || rows.iter().any(|&r| r >= total) {
            return Err(Error::Shape(format!(
                "scatter_rows: {} targets for {n} rows into {total}",
                rows.len()
            )));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; total * f];
        for (i, &r) in rows.iter().enumerate() {
            out[r * f..(r + 1) * f].copy_from_slice(&src[i * f..(i + 1) * f]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![total, f], out)?, Op::ScatterRows(a, rows.to_vec()), ng))
    }

    /// Interleaves `T` per-step matrices `[B×F]` into `[(B·T)×F]` with row
    /// `b·T + t` taken from step `t`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps
            .first()
            .ok_or_else(|| Error::InvalidInput("stack_steps of zero steps".into()))?;
        let (b, f) = matrix_dims(self.value(first), "stack_steps")?;
        for &s in steps {
            if self.value(s).shape() != [b, f] {
                return Err(shape_err("stack_steps", self.value(first).shape(), self.value(s).shape()));
            }
        }
        let t = steps.len();
        let mut out = vec![0.0; b * t * f];
        for (ti, &s) in steps.iter().enumerate() {
            for (bi, row) in self.value(s).data().chunks(f).enumerate() {
                out[(bi * t + ti) * f..(bi * t + ti + 1) * f].copy_from_slice(row);
            }
        }
        let ng = steps.iter().any(|&s| self.ng(s));
        Ok(self.push(Tensor::new(vec![b * t, f], out)?, Op::StackSteps(steps.to_vec()), ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.nodes[a.0].value.as_matrix();
                let m = node.value.shape()[1];
                acc(*a, &mut |ga| matmul_a_bt_acc(g, val(*b), ga, n, k, m));
                acc(*b, &mut |gb| matmul_at_b_acc(val(*a), g, gb, n, k, m));
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let m = self.nodes[bias.0].value.len();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(m) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += x * y;
                    }
                });
            }
            Op::Affine(a, scale) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &x)| *o += scale * x));
            }
            Op::Act(a, kind) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for (((o, &gx), &x), &yv) in ga.iter_mut().zip(g).zip(val(*a)).zip(y) {
                        *o += gx * kind.derivative(x, yv);
                    }
                });
            }
            Op::Cos(a) => acc(*a, &mut |ga| {
                for ((o, &gx), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                    *o -= gx * x.sin();
                }
            }),
            Op::Sin(a) => acc(*a, &mut |ga| {
                for ((o, &gx), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                    *o += gx * x.cos();
                }
            }),
            Op::Softmax(a) => {
                let (_, cols) = node.value.as_matrix();
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for ((orow, grow), yrow) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, &gx), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gx - dot);
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let d = inv_std.len();
                let n = xhat.len() / d;
                let gam = val(*gamma);
                acc(*beta, &mut |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    if *batch_stats {
                        let mut sum_g = vec![0.0; d];
                        let mut sum_gh = vec![0.0; d];
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                sum_g[j] += grow[j];
                                sum_gh[j] += grow[j] * hrow[j];
                            }
                        }
                        let nf = n as f64;
                        for i in 0..n {
                            for j in 0..d {
                                let k = i * d + j;
                                gx[k] += gam[j] * inv_std[j] / nf
                                    * (nf * g[k] - sum_g[j] - xhat[k] * sum_gh[j]);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..d {
                                gx[i * d + j] += g[i * d + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    acc(p, &mut |gp| {
                        for (orow, grow) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(orow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let m = self.nodes[a.0].value.shape()[1];
                let len = node.value.shape()[1];
                acc(*a, &mut |ga| {
                    for (orow, grow) in ga.chunks_mut(m).zip(g.chunks(len)) {
                        add_into(&mut orow[*start..start + len], grow);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::PoolMeanStd { x, group } => {
                let f = self.nodes[x.0].value.shape()[1];
                let src = val(*x);
                let out = node.value.data();
                let s = *group as f64;
                acc(*x, &mut |gx| {
                    for (gi, (grow, orow)) in g.chunks(2 * f).zip(out.chunks(2 * f)).enumerate() {
                        let (gm, gs) = grow.split_at(f);
                        let (mean, std) = orow.split_at(f);
                        let base = gi * group * f;
                        for r in 0..*group {
                            for j in 0..f {
                                let k = base + r * f + j;
                                let mut d = gm[j] / s;
                                // Zero spread has no defined derivative; take the zero subgradient.
                                if std[j] > 0.0 {
                                    d += gs[j] * (src[k] - mean[j]) / (s * std[j]);
                                }
                                gx[k] += d;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.nodes[logits.0].value.shape()[1];
                let b = labels.len() as f64;
                acc(*logits, &mut |gl| {
                    for (i, (orow, prow)) in gl.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        for (j, (o, &p)) in orow.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            *o += g[0] * (p - onehot) / b;
                        }
                    }
                });
            }
            Op::WeightedSum(a, w) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(w).for_each(|(o, &wv)| *o += g[0] * wv));
            }
            Op::AttnPool { weights, values } => {
                let (b, t) = self.nodes[weights.0].value.as_matrix();
                let f = node.value.shape()[1];
                let (w, v) = (val(*weights), val(*values));
                acc(*weights, &mut |gw| {
                    for bi in 0..b {
                        let grow = &g[bi * f..(bi + 1) * f];
                        for ti in 0..t {
                            let vrow = &v[(bi * t + ti) * f..(bi * t + ti + 1) * f];
                            gw[bi * t + ti] += grow.iter().zip(vrow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*values, &mut |gv| {
                    for bi in 0..b {
                        let grow = &g[bi * f..(bi + 1) * f];
                        for ti in 0..t {
                            let a = w[bi * t + ti];
                            let orow = &mut gv[(bi * t + ti) * f..(bi * t + ti + 1) * f];
                            for (o, &x) in orow.iter_mut().zip(grow) {
                                *o += a * x;
                            }
                        }
                    }
                });
            }
            Op::GatherRows(a, rows) => {
                let f = node.value.shape()[1];
                acc(*a, &mut |ga| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * f..(r + 1) * f], &g[i * f..(i + 1) * f]);
                    }
                });
            }
            Op::StackSteps(steps) => {
                let f = node.value.shape()[1];
                let t = steps.len();
                for (ti, &s) in steps.iter().enumerate() {
                    acc(s, &mut |gs| {
                        for (bi, orow) in gs.chunks_mut(f).enumerate() {
                            add_into(orow, &g[(bi * t + ti) * f..(bi * t + ti + 1) * f]);
                        }
                    });
                }
            }
            Op::ScatterRows(a, rows) => {
                let f = node.value.shape()[1];
                acc(*a, &mut |ga| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[i * f..(i + 1) * f], &g[r * f..(r + 1) * f]);
                    }
                });
            }
        }
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sum that does not depend on the order of `buf`; reorders it.
pub(crate) fn sorted_sum(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

/// Numerically stable softmax of one row, optionally restricted by a mask.
pub(crate) fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let valid = |i: usize| mask.is_none_or(|m| m[i]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(i, _)| valid(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    for (i, v) in row.iter_mut().enumerate() {
        *v = if valid(i) { (*v - max).exp() } else { 0.0 };
    }
    let mut buf = row.to_vec();
    let total = sorted_sum(&mut buf);
    row.iter_mut().for_each(|v| *v /= total);
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, zero if `v` did not influence it.
    pub fn of(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.value(v).shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients for every parameter bound on `graph`, keyed by name.
    pub fn params(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .param_vars()
            .map(|(name, v)| (name.to_string(), self.of(graph, v)))
            .collect()
    }
}
