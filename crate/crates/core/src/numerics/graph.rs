//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operator applied during a forward pass. Values
//! are computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products into every node that depends on a
//! parameter or on an input registered with `requires_grad`.
//!
//! Tensors are viewed as matrices (see [`Tensor::rows`]/[`Tensor::cols`]).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{Gradients, ParamId, ParamStore};
use super::rng::RngState;
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    MulConst(Var, Vec<f64>),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<Option<usize>> },
    MaxRows { x: Var, argmax: Vec<usize> },
    Abs(Var),
    Square(Var),
    Huber(Var, f64),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape bound to a parameter store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    mode: Mode,
    rng: RngState,
}

impl<'p> Graph<'p> {
    /// New tape. `rng` drives dropout masks in training mode.
    pub fn new(store: &'p ParamStore, mode: Mode, rng: RngState) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: vec![None; store.len()], mode, rng }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Node for a stored parameter. Repeated calls return the same node, so a
    /// parameter used in several places receives the sum of all contributions.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Leaf, true);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    /// The node a parameter was bound to on this tape, if it was used.
    pub fn param_node(&self, id: ParamId) -> Option<Var> {
        self.param_nodes[id.index()]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input; with `requires_grad` its gradient is available from
    /// [`Grads::wrt`].
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b), self.ng(&[a, b])))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMulNT(a, b), self.ng(&[a, b])))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), self.ng(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), self.ng(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), self.ng(&[a, b])))
    }

    /// Adds a row vector `b` (length = cols of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(b).len() != n {
            return Err(shape_err("add_row", format!("[{m},{n}] + row of {}", self.value(b).len())));
        }
        let bv = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            row.iter_mut().zip(bv).for_each(|(x, y)| *x += y);
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, b), self.ng(&[a, b])))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, s), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(a);
        Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, gelu);
        let ng = self.ng(&[a]);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::abs);
        let ng = self.ng(&[a]);
        self.push(t, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * x);
        let ng = self.ng(&[a]);
        self.push(t, Op::Square(a), ng)
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let t = self.map(a, |x| huber(x, delta));
        let ng = self.ng(&[a]);
        self.push(t, Op::Huber(a, delta), ng)
    }

    /// Row-wise softmax. With `key_valid`, columns marked `false` get
    /// probability zero; a row with no valid column is all zeros.
    pub fn softmax_rows(&mut self, a: Var, key_valid: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(kv) = key_valid {
            if kv.len() != n {
                return Err(shape_err("softmax", format!("{n} columns but {} validity flags", kv.len())));
            }
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let o = &mut out[i * n..(i + 1) * n];
            let valid = |j: usize| key_valid.map_or(true, |kv| kv[j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if valid(j) && x > mx {
                    mx = x;
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut s = 0.0;
            for j in 0..n {
                if valid(j) {
                    o[j] = libm::exp(row[j] - mx);
                    s += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(a), self.ng(&[a])))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err(
                "layer_norm",
                format!("width {n} but gamma {} beta {}", self.value(gamma).len(), self.value(beta).len()),
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Inverted dropout; the identity in evaluation mode or with `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let mask: Vec<f64> =
            (0..n).map(|_| if self.rng.unit() < keep { 1.0 / keep } else { 0.0 }).collect();
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().zip(&mask).map(|(x, m)| x * m).collect())
            .expect("same shape");
        let ng = self.ng(&[a]);
        self.push(t, Op::MulConst(a, mask), ng)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(shape_err("mul_const", format!("{:?} vs {:?}", self.value(a).shape(), c.shape())));
        }
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().zip(c.data()).map(|(x, m)| x * m).collect())?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::MulConst(a, c.data().to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.dims(p).1).ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(shape_err("concat_rows", format!("column counts {n} and {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, n, data)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|&p| self.dims(p).0).ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(shape_err("concat_cols", format!("row counts {m} and {r}")));
            }
            total += c;
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.dims(p);
            let src = self.value(p).data();
            for i in 0..m {
                data[i * total + off..i * total + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let t = Tensor::matrix(m, total, data)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(shape_err("slice_cols", format!("columns {start}..{} of {n}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let t = Tensor::matrix(m, len, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, ng))
    }

    /// Picks rows of `x` by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut data = vec![0.0; idx.len() * n];
        let src = self.value(x).data();
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= m {
                    return Err(shape_err("gather_rows", format!("row {i} of {m}")));
                }
                data[r * n..(r + 1) * n].copy_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        let t = Tensor::matrix(idx.len(), n, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let idx: Vec<Option<usize>> = idx.iter().map(|&i| Some(i)).collect();
        self.gather_rows(x, &idx)
    }

    /// Column-wise maximum over rows, producing a `1 x n` row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if m == 0 {
            return Err(shape_err("max_rows", "empty input".into()));
        }
        let src = self.value(x).data();
        let mut argmax = vec![0usize; n];
        let mut out = src[..n].to_vec();
        for i in 1..m {
            for j in 0..n {
                if src[i * n + j] > out[j] {
                    out[j] = src[i * n + j];
                    argmax[j] = i;
                }
            }
        }
        let t = Tensor::matrix(1, n, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::MaxRows { x, argmax }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Mean of all entries; zero for an empty tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = if t.is_empty() { 0.0 } else { t.data().iter().sum::<f64>() / t.len() as f64 };
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Negative log-likelihood of `target` under softmax of a logit row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let l = self.value(logits).data();
        if target >= l.len() {
            return Err(shape_err("cross_entropy", format!("class {target} of {}", l.len())));
        }
        let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = l.iter().map(|v| libm::exp(v - mx)).collect();
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
        let loss = -(l[target] - mx - libm::log(s));
        let ng = self.ng(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, ng))
    }

    /// `x * w + b` for a `[in, out]` weight and `[out]` bias.
    pub fn affine(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Grads { grads, param_nodes: self.param_nodes.clone() });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Grads { grads, param_nodes: self.param_nodes.clone() })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let dims = |v: Var| self.dims(v);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let (_, n) = dims(*b);
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt_acc(gy, val(*b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn_acc(val(*a), gy, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims(*a);
                let (n, _) = dims(*b);
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_acc(gy, val(*b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn_acc(gy, val(*a), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for (v, s) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(g) = self.slot(grads, v) {
                        g.iter_mut().zip(gy).for_each(|(x, y)| *x += s * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, s) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(g) = self.slot(grads, v) {
                        g.iter_mut().zip(gy).for_each(|(x, y)| *x += s * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(gy).zip(val(*b)).for_each(|((x, y), o)| *x += y * o);
                }
                if let Some(g) = self.slot(grads, *b) {
                    g.iter_mut().zip(gy).zip(val(*a)).for_each(|((x, y), o)| *x += y * o);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(x, y)| *x += y);
                }
                let n = dims(*a).1.max(1);
                if let Some(g) = self.slot(grads, *b) {
                    for row in gy.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Gelu(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(gy).zip(val(*a)).for_each(|((x, y), v)| *x += y * gelu_grad(*v));
                }
            }
            Op::Abs(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(gy).zip(val(*a)).for_each(|((x, y), v)| *x += y * sign(*v));
                }
            }
            Op::Square(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(gy).zip(val(*a)).for_each(|((x, y), v)| *x += 2.0 * v * y);
                }
            }
            Op::Huber(a, d) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(gy).zip(val(*a)).for_each(|((x, y), v)| {
                        let dv = if v.abs() <= *d { *v } else { d * sign(*v) };
                        *x += y * dv;
                    });
                }
            }
            Op::Softmax(a) => {
                let n = dims(*a).1.max(1);
                let yv = node.value.data();
                if let Some(g) = self.slot(grads, *a) {
                    for ((gr, yr), gyr) in g.chunks_mut(n).zip(yv.chunks(n)).zip(gy.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gyr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (gyr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (_, n) = dims(*x);
                let gv = val(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gyr, xr) in gy.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gyr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gyr in gy.chunks(n) {
                        gb.iter_mut().zip(gyr).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for (i, ((gxr, gyr), xr)) in gx.chunks_mut(n).zip(gy.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dxhat[j] = gyr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gxr[j] += rstd[i] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::MulConst(a, mask) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(gy).zip(mask).for_each(|((x, y), m)| *x += y * m);
                }
            }
            Op::Reshape(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(x, y)| *x += y);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(g) = self.slot(grads, p) {
                        g.iter_mut().zip(&gy[off..off + len]).for_each(|(x, y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let c = dims(p).1;
                    if let Some(g) = self.slot(grads, p) {
                        for i in 0..m {
                            let src = &gy[i * total + off..i * total + off + c];
                            g[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = dims(*x);
                let len = node.value.cols();
                if let Some(g) = self.slot(grads, *x) {
                    for i in 0..m {
                        let dst = &mut g[i * n + start..i * n + start + len];
                        dst.iter_mut().zip(&gy[i * len..(i + 1) * len]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let n = dims(*x).1;
                if let Some(g) = self.slot(grads, *x) {
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            let dst = &mut g[i * n..(i + 1) * n];
                            dst.iter_mut().zip(&gy[r * n..(r + 1) * n]).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                let n = dims(*x).1;
                if let Some(g) = self.slot(grads, *x) {
                    for (j, &i) in argmax.iter().enumerate() {
                        g[i * n + j] += gy[j];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().for_each(|x| *x += gy[0]);
                }
            }
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len();
                if len > 0 {
                    if let Some(g) = self.slot(grads, *a) {
                        let s = gy[0] / len as f64;
                        g.iter_mut().for_each(|x| *x += s);
                    }
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                if let Some(g) = self.slot(grads, *logits) {
                    for (j, (x, p)) in g.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *x += gy[0] * (p - onehot);
                    }
                }
            }
        }
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: Vec<Option<Var>>,
}

impl Grads {
    /// Gradient with respect to a node, if it required one and was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter bound on the tape.
    pub fn params(&self, store: &ParamStore) -> Gradients {
        let grads = self
            .param_nodes
            .iter()
            .zip(store.iter())
            .map(|(node, (_, p))| {
                node.and_then(|v| self.grads[v.0].as_ref()).map(|g| {
                    Tensor::new(p.value.shape().to_vec(), g.clone()).expect("parameter shape")
                })
            })
            .collect();
        Gradients { grads }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
