//! Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse recording order, so gradient accumulation order
//! is fixed by construction and repeated runs are bit-identical.

use std::collections::HashMap;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::{AttentionMask, Tensor};
use crate::error::{shape_err, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Identity(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        x: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass. Drop it (or call [`Tape::clear`]) after the
/// optimizer step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Records a constant: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Records a differentiable leaf whose gradient can be read back with
    /// [`Tape::grad`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Records (once per tape) the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let t = store.get(id);
        let trainable = t.requires_grad;
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("param shape");
        let v = self.push(value, Op::Param, trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(shape_err!(
                "matmul {}x{} by {}x{}",
                n,
                k,
                tb.rows(),
                m
            ));
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul_acc(ta.data(), tb.data(), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(shape_err!(
                "matmul_nt {}x{} by ({}x{})^T",
                n,
                k,
                m,
                tb.cols()
            ));
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul_nt_acc(ta.data(), tb.data(), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMulNt(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(shape_err!(
                "{what}: {}x{} vs {}x{}",
                ta.rows(),
                ta.cols(),
                tb.rows(),
                tb.cols()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::matrix(ta.rows(), ta.cols(), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::matrix(ta.rows(), ta.cols(), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err!(
                "add_row: {}x{} + {}x{}",
                ta.rows(),
                ta.cols(),
                tr.rows(),
                tr.cols()
            ));
        }
        let m = ta.cols();
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(m.max(1)) {
            for (o, b) in chunk.iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let t = Tensor::matrix(ta.rows(), m, out)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(t, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x * s).collect();
        let t = Tensor::matrix(ta.rows(), ta.cols(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// Adds a constant tensor; the gradient passes straight through to `a`.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != c.len() {
            return Err(shape_err!("add_const: {} vs {} values", ta.len(), c.len()));
        }
        let out: Vec<f64> = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::matrix(ta.rows(), ta.cols(), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Identity(a), ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| kernels::gelu(x)).collect();
        let t = Tensor::matrix(ta.rows(), ta.cols(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with learned gain and bias (`1 x m` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = (tx.rows(), tx.cols());
        if self.value(gain).len() != m || self.value(bias).len() != m {
            return Err(shape_err!("layer_norm gain/bias must have {m} values"));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..m {
                let h = (row[c] - mean) * rs;
                xhat[r * m + c] = h;
                out[r * m + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row softmax; columns flagged invalid in `mask` get exactly zero weight.
    /// A row with no valid column is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let ta = self.value(a);
        let (n, m) = (ta.rows(), ta.cols());
        if let Some(mask) = mask {
            if mask.len() != m {
                return Err(shape_err!("mask length {} vs {} columns", mask.len(), m));
            }
        }
        let mut out = ta.data().to_vec();
        for r in 0..n {
            kernels::softmax_in_place(&mut out[r * m..(r + 1) * m], mask.map(|k| k.flags()));
        }
        let t = Tensor::matrix(n, m, out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Softmax(a), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (n, m) = (ta.rows(), ta.cols());
        if start + len > m {
            return Err(shape_err!("slice_cols {start}+{len} > {m}"));
        }
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&ta.row_slice(r)[start..start + len]);
        }
        let t = Tensor::matrix(n, len, out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SliceCols { x: a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != n) {
            return Err(shape_err!("concat_cols: row counts differ"));
        }
        let m: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != m) {
            return Err(shape_err!("concat_rows: column counts differ"));
        }
        let mut out = Vec::new();
        let mut n = 0;
        for p in parts {
            let t = self.value(*p);
            n += t.rows();
            out.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(n, m, out)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Selects rows by index (repeats allowed); used for embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (n, m) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(shape_err!("gather_rows index {i} out of {n}"));
            }
            out.extend_from_slice(ta.row_slice(i));
        }
        let t = Tensor::matrix(idx.len(), m, out)?;
        let ng = self.ng(a);
        Ok(self.push(
            t,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (n, m) = (ta.rows(), ta.cols());
        if n == 0 {
            return Err(shape_err!("mean_rows of an empty matrix"));
        }
        let mut out = vec![0.0; m];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(ta.row_slice(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let ng = self.ng(a);
        Ok(self.push(Tensor::row(out), Op::MeanRows(a), ng))
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, m) = (ta.rows(), ta.cols());
        let mut out = ta.data().to_vec();
        let mut norms = vec![0.0; n];
        for r in 0..n {
            let row = &mut out[r * m..(r + 1) * m];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms[r] = norm;
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let t = Tensor::matrix(n, m, out).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::L2NormRows { x: a, norms }, ng)
    }

    /// Mean over rows of `logsumexp(row) - row[target]`, a `1 x 1` scalar.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, m) = (tl.rows(), tl.cols());
        if targets.len() != n || n == 0 {
            return Err(shape_err!("cross_entropy: {} targets for {} rows", targets.len(), n));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        for r in 0..n {
            let t = targets[r];
            if t >= m {
                return Err(shape_err!("target {t} out of {m} columns"));
            }
            let row = tl.row_slice(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            total += lse - row[t];
            let prow = &mut probs[r * m..(r + 1) * m];
            prow.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = Tensor::row(vec![total / n as f64]);
        let ng = self.ng(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                x: logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Sum of `1 x 1` scalars.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = parts[0];
        for p in &parts[1..] {
            acc = self.add(acc, *p)?;
        }
        Ok(acc)
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(shape_err!("backward needs a scalar output"));
        }
        self.backward_with(&[(out, vec![1.0])])
    }

    /// Reverse pass seeded with explicit upstream gradients.
    pub fn backward_with(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(shape_err!("seed gradient length mismatch"));
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::Numeric("non-finite seed gradient".into()));
            }
            accumulate(&mut grads[v.0], g);
            start = start.max(v.0 + 1);
        }
        for i in (0..start).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    let g = grads[a.0].get_or_insert_with(|| vec![0.0; n * k]);
                    kernels::matmul_nt_acc(gy, tb.data(), g, n, m, k);
                }
                if self.ng(*b) {
                    let g = grads[b.0].get_or_insert_with(|| vec![0.0; k * m]);
                    kernels::matmul_tn_acc(ta.data(), gy, g, n, k, m);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                if self.ng(*a) {
                    let g = grads[a.0].get_or_insert_with(|| vec![0.0; n * k]);
                    kernels::matmul_acc(gy, tb.data(), g, n, m, k);
                }
                if self.ng(*b) {
                    let g = grads[b.0].get_or_insert_with(|| vec![0.0; m * k]);
                    kernels::matmul_tn_acc(gy, ta.data(), g, n, m, k);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], gy);
                }
                if self.ng(*b) {
                    accumulate(&mut grads[b.0], gy);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let g = grads[a.0].get_or_insert_with(|| vec![0.0; gy.len()]);
                    for ((o, d), v) in g.iter_mut().zip(gy).zip(tb.data()) {
                        *o += d * v;
                    }
                }
                if self.ng(*b) {
                    let g = grads[b.0].get_or_insert_with(|| vec![0.0; gy.len()]);
                    for ((o, d), v) in g.iter_mut().zip(gy).zip(ta.data()) {
                        *o += d * v;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], gy);
                }
                if self.ng(*row) {
                    let m = y.cols();
                    let g = grads[row.0].get_or_insert_with(|| vec![0.0; m]);
                    for chunk in gy.chunks(m.max(1)) {
                        for (o, d) in g.iter_mut().zip(chunk) {
                            *o += d;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.ng(*a) {
                    let g = grads[a.0].get_or_insert_with(|| vec![0.0; gy.len()]);
                    for (o, d) in g.iter_mut().zip(gy) {
                        *o += d * s;
                    }
                }
            }
            Op::Identity(a) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], gy);
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let x = self.value(*a).data();
                    let g = grads[a.0].get_or_insert_with(|| vec![0.0; gy.len()]);
                    for ((o, d), xv) in g.iter_mut().zip(gy).zip(x) {
                        *o += d * kernels::gelu_grad(*xv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (n, m) = (y.rows(), y.cols());
                let gv = self.value(*gain).data();
                if self.ng(*gain) {
                    let g = grads[gain.0].get_or_insert_with(|| vec![0.0; m]);
                    for r in 0..n {
                        for c in 0..m {
                            g[c] += gy[r * m + c] * xhat[r * m + c];
                        }
                    }
                }
                if self.ng(*bias) {
                    let g = grads[bias.0].get_or_insert_with(|| vec![0.0; m]);
                    for r in 0..n {
                        for c in 0..m {
                            g[c] += gy[r * m + c];
                        }
                    }
                }
                if self.ng(*x) {
                    let g = grads[x.0].get_or_insert_with(|| vec![0.0; n * m]);
                    let mut dxhat = vec![0.0; m];
                    for r in 0..n {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..m {
                            let d = gy[r * m + c] * gv[c];
                            dxhat[c] = d;
                            s1 += d;
                            s2 += d * xhat[r * m + c];
                        }
                        let k = rstd[r] / m as f64;
                        for c in 0..m {
                            g[r * m + c] +=
                                k * (m as f64 * dxhat[c] - s1 - xhat[r * m + c] * s2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.ng(*a) {
                    let (n, m) = (y.rows(), y.cols());
                    let g = grads[a.0].get_or_insert_with(|| vec![0.0; n * m]);
                    let yd = y.data();
                    for r in 0..n {
                        let row = r * m..(r + 1) * m;
                        let dot: f64 = yd[row.clone()].iter().zip(&gy[row.clone()]).map(|(p, d)| p * d).sum();
                        for c in row {
                            g[c] += yd[c] * (gy[c] - dot);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.ng(*x) {
                    let (n, len) = (y.rows(), y.cols());
                    let m = self.value(*x).cols();
                    let g = grads[x.0].get_or_insert_with(|| vec![0.0; n * m]);
                    for r in 0..n {
                        for c in 0..len {
                            g[r * m + start + c] += gy[r * len + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (n, m) = (y.rows(), y.cols());
                let mut off = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if self.ng(*p) {
                        let g = grads[p.0].get_or_insert_with(|| vec![0.0; n * pc]);
                        for r in 0..n {
                            for c in 0..pc {
                                g[r * pc + c] += gy[r * m + off + c];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.ng(*p) {
                        accumulate(&mut grads[p.0], &gy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, idx } => {
                if self.ng(*x) {
                    let tx = self.value(*x);
                    let m = tx.cols();
                    let g = grads[x.0].get_or_insert_with(|| vec![0.0; tx.len()]);
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..m {
                            g[i * m + c] += gy[r * m + c];
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                if self.ng(*a) {
                    let ta = self.value(*a);
                    let (n, m) = (ta.rows(), ta.cols());
                    let g = grads[a.0].get_or_insert_with(|| vec![0.0; n * m]);
                    let inv = 1.0 / n as f64;
                    for r in 0..n {
                        for c in 0..m {
                            g[r * m + c] += gy[c] * inv;
                        }
                    }
                }
            }
            Op::L2NormRows { x, norms } => {
                if self.ng(*x) {
                    let (n, m) = (y.rows(), y.cols());
                    let yd = y.data();
                    let g = grads[x.0].get_or_insert_with(|| vec![0.0; n * m]);
                    for r in 0..n {
                        let row = r * m..(r + 1) * m;
                        let dot: f64 = yd[row.clone()].iter().zip(&gy[row.clone()]).map(|(a, b)| a * b).sum();
                        for c in row {
                            g[c] += (gy[c] - yd[c] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::CrossEntropy { x, targets, probs } => {
                if self.ng(*x) {
                    let tx = self.value(*x);
                    let (n, m) = (tx.rows(), tx.cols());
                    let scale = gy[0] / n as f64;
                    let g = grads[x.0].get_or_insert_with(|| vec![0.0; n * m]);
                    for r in 0..n {
                        for c in 0..m {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            g[r * m + c] += scale * (probs[r * m + c] - onehot);
                        }
                    }
                }
            }
        }
    }

    /// Adds the gradients of every parameter recorded on this tape into the
    /// store's accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let mut ids: Vec<(&ParamId, &Var)> = self.params.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (id, v) in ids {
            if let Some(g) = self.grad(*v) {
                store.accumulate_grad(*id, g);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_values_and_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(2, 1, &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
        let ones = tape.constant(t(1, 2, &[1.0, 1.0]));
        let s = tape.matmul(ones, c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(t(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(t(1, 2, &[3.0, 4.0]));
        let p = tape.matmul_nt(a, b).unwrap();
        tape.backward(p).unwrap();
        assert!(tape.grad(a).is_none());
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn masked_softmax_gives_exact_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 3, &[1.0, 50.0, 2.0]));
        let mask = AttentionMask::new(vec![true, false, true]);
        let s = tape.softmax_rows(a, Some(&mask)).unwrap();
        let v = tape.value(s).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_row_is_log_m() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 4, &[0.3; 4]));
        let l = tape.cross_entropy_rows(a, &[2]).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, &[1.0, 2.0]));
        assert!(tape.backward(a).is_err());
    }
}
