//! Dynamic tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! tape in reverse once. The tape is rebuilt for every training clip.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{numel, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Sin(Var),
    Log(Var),
    Abs(Var),
    Softmax { x: Var, outer: usize, dim: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, dim: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { parts: Vec<Var>, outer: usize, dims: Vec<usize>, inner: usize },
    Slice { x: Var, outer: usize, dim: usize, inner: usize, start: usize, len: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    GatherElems { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, outer: usize, dim: usize, inner: usize },
    Focal { x: Var, targets: Vec<f64>, alpha: f64, gamma: f64 },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// reach the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `a (m x k) * b (k x n)`.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m x k) * b^T` with `b (n x k)`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * b` with `a (k x m)`, `b (k x n)`.
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Elementwise sigmoid focal loss on a logit, returning `(loss, dloss/dlogit)`.
pub(crate) fn focal_elem(x: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = 1.0 / (1.0 + (-x).exp());
    if target > 0.5 {
        let log_p = -softplus(-x);
        let w = (1.0 - p).powf(gamma);
        (-alpha * w * log_p, alpha * w * (gamma * p * log_p - (1.0 - p)))
    } else {
        let log_q = -softplus(x);
        let w = p.powf(gamma);
        (
            -(1.0 - alpha) * w * log_q,
            (1.0 - alpha) * w * (p - gamma * (1.0 - p) * log_q),
        )
    }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("graph values are finite")
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { shape, data, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (gradients are still tracked but never exported).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: t.into_data(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    /// Leaf for a stored parameter. Aliased names resolve to one leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let canonical = store.resolve(name)?;
        if let Some(&v) = self.params.get(canonical) {
            return Ok(v);
        }
        let t = store.get(canonical)?;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(canonical.to_string(), v);
        Ok(v)
    }

    /// Canonical parameter names recorded on this graph with their leaves.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(name, self.shape(a).to_vec(), data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let xs = self.shape(x);
        let rs = self.shape(row);
        if xs.len() != 2 || rs.len() != 1 || xs[1] != rs[0] {
            return Err(Error::shape(op, format!("{:?} with row {:?}", xs, rs)));
        }
        Ok(xs[1])
    }

    /// `x (r x c) + row (c)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_broadcast("add_row", x, row)?;
        let r = self.value(row);
        let data = self
            .value(x)
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        self.push("add_row", self.shape(x).to_vec(), data, Op::AddRow(x, row))
    }

    /// `x (r x c) * row (c)` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_broadcast("mul_row", x, row)?;
        let r = self.value(row);
        let data = self
            .value(x)
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a * b))
            .collect();
        self.push("mul_row", self.shape(x).to_vec(), data, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).iter().map(|v| v * c).collect();
        self.push("scale", self.shape(x).to_vec(), data, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).iter().map(|v| v + c).collect();
        self.push("add_scalar", self.shape(x).to_vec(), data, Op::AddScalar(x))
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got {:?}", s))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
        }
        let data = mm(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul_t", a)?;
        let (n, k2) = self.mat_dims("matmul_t", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("[{m}x{k}] * [{n}x{k2}]^T")));
        }
        let data = mm_nt(self.value(a), self.value(b), m, k, n);
        self.push("matmul_t", vec![m, n], data, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat_dims("transpose", x)?;
        let src = self.value(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], data, Op::Transpose(x))
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(name, self.shape(x).to_vec(), data, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.map("sin", x, f64::sin, Op::Sin(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map("abs", x, f64::abs, Op::Abs(x))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", s)));
        }
        Ok(axis_split(s, axis))
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, dim, inner) = self.check_axis("softmax", x, axis)?;
        let data = softmax_forward(self.value(x), outer, dim, inner, false);
        self.push("softmax", self.shape(x).to_vec(), data, Op::Softmax { x, outer, dim, inner })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, dim, inner) = self.check_axis("log_softmax", x, axis)?;
        let data = softmax_forward(self.value(x), outer, dim, inner, true);
        self.push(
            "log_softmax",
            self.shape(x).to_vec(),
            data,
            Op::LogSoftmax { x, outer, dim, inner },
        )
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("affine params must be [{d}]")));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.push("layer_norm", s, out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {:?}", base)));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, base)));
            }
            dims.push(s[axis]);
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let total: usize = dims.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &d) in parts.iter().zip(&dims) {
                let v = self.value(p);
                data.extend_from_slice(&v[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                dims,
                inner,
            },
        )
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, dim, inner) = self.check_axis("slice", x, axis)?;
        if start + len > dim {
            return Err(Error::shape("slice", format!("[{start}, {}) beyond {dim}", start + len)));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = len;
        self.push(
            "slice",
            shape,
            data,
            Op::Slice {
                x,
                outer,
                dim,
                inner,
                start,
                len,
            },
        )
    }

    /// Rows of a matrix picked (with repetition) by index.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.mat_dims("gather_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        self.push(
            "gather_rows",
            vec![rows.len(), c],
            data,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Flat-indexed elements as a vector.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_elems", format!("index {bad} of {n}")));
        }
        let v = self.value(x);
        let data = idx.iter().map(|&i| v[i]).collect();
        self.push(
            "gather_elems",
            vec![idx.len()],
            data,
            Op::GatherElems {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let data = self.value(x).to_vec();
        self.push("reshape", shape, data, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![], vec![m], Op::Mean(x))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, dim, inner) = self.check_axis("sum_axis", x, axis)?;
        let v = self.value(x);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                for i in 0..inner {
                    data[o * inner + i] += v[(o * dim + d) * inner + i];
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        self.push("sum_axis", shape, data, Op::SumAxis { x, outer, dim, inner })
    }

    /// Elementwise sigmoid focal loss on logits against 0/1 targets.
    pub fn focal(&mut self, logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64) -> Result<Var> {
        if targets.len() != self.value(logits).len() {
            return Err(Error::shape("focal", "targets must match logits"));
        }
        let data = self
            .value(logits)
            .iter()
            .zip(&targets)
            .map(|(&x, &t)| focal_elem(x, t, alpha, gamma).0)
            .collect();
        self.push(
            "focal",
            self.shape(logits).to_vec(),
            data,
            Op::Focal {
                x: logits,
                targets,
                alpha,
                gamma,
            },
        )
    }

    /// Sum of scalar nodes (0 when empty).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        match terms {
            [] => Ok(self.constant(Tensor::scalar(0.0))),
            [first, rest @ ..] => {
                let mut acc = *first;
                for &t in rest {
                    acc = self.add(acc, t)?;
                }
                Ok(acc)
            }
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.data;
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(grads, *a, gy);
                acc(grads, *b, gy);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gy);
                acc_with(grads, *b, gy.len(), |k| -gy[k]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc_with(grads, *a, gy.len(), |k| gy[k] * bv[k]);
                acc_with(grads, *b, gy.len(), |k| gy[k] * av[k]);
            }
            Op::AddRow(x, r) => {
                acc(grads, *x, gy);
                let c = val(*r).len();
                let mut gr = vec![0.0; c];
                for (k, g) in gy.iter().enumerate() {
                    gr[k % c] += g;
                }
                acc(grads, *r, &gr);
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (val(*x), val(*r));
                let c = rv.len();
                acc_with(grads, *x, gy.len(), |k| gy[k] * rv[k % c]);
                let mut gr = vec![0.0; c];
                for (k, g) in gy.iter().enumerate() {
                    gr[k % c] += g * xv[k];
                }
                acc(grads, *r, &gr);
            }
            Op::Scale(x, c) => acc_with(grads, *x, gy.len(), |k| gy[k] * c),
            Op::AddScalar(x) => acc(grads, *x, gy),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(grads, *a, &mm_nt(gy, val(*b), m, n, k));
                acc(grads, *b, &mm_tn(val(*a), gy, m, k, n));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                acc(grads, *a, &mm(gy, val(*b), m, n, k));
                acc(grads, *b, &mm_tn(gy, val(*a), m, n, k));
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = gy[j * r + i];
                    }
                }
                acc(grads, *x, &g);
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc_with(grads, *x, gy.len(), |k| if xv[k] > 0.0 { gy[k] } else { 0.0 });
            }
            Op::Sigmoid(x) => acc_with(grads, *x, gy.len(), |k| gy[k] * y[k] * (1.0 - y[k])),
            Op::Exp(x) => acc_with(grads, *x, gy.len(), |k| gy[k] * y[k]),
            Op::Sin(x) => {
                let xv = val(*x);
                acc_with(grads, *x, gy.len(), |k| gy[k] * xv[k].cos());
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc_with(grads, *x, gy.len(), |k| gy[k] / xv[k]);
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc_with(grads, *x, gy.len(), |k| {
                    if xv[k] > 0.0 {
                        gy[k]
                    } else if xv[k] < 0.0 {
                        -gy[k]
                    } else {
                        0.0
                    }
                });
            }
            Op::Softmax { x, outer, dim, inner } => {
                let mut g = vec![0.0; gy.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |d: usize| (o * dim + d) * inner + i;
                        let dot: f64 = (0..*dim).map(|d| gy[idx(d)] * y[idx(d)]).sum();
                        for d in 0..*dim {
                            g[idx(d)] = y[idx(d)] * (gy[idx(d)] - dot);
                        }
                    }
                }
                acc(grads, *x, &g);
            }
            Op::LogSoftmax { x, outer, dim, inner } => {
                let mut g = vec![0.0; gy.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |d: usize| (o * dim + d) * inner + i;
                        let total: f64 = (0..*dim).map(|d| gy[idx(d)]).sum();
                        for d in 0..*dim {
                            g[idx(d)] = gy[idx(d)] - y[idx(d)].exp() * total;
                        }
                    }
                }
                acc(grads, *x, &g);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = val(*gamma);
                let d = gv.len();
                let rows = rstd.len();
                let mut gx = vec![0.0; gy.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let gyr = &gy[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        gg[j] += gyr[j] * xh[j];
                        gb[j] += gyr[j];
                        let dxh = gyr[j] * gv[j];
                        s1 += dxh;
                        s2 += dxh * xh[j];
                    }
                    let scale = rstd[r] / d as f64;
                    for j in 0..d {
                        let dxh = gyr[j] * gv[j];
                        gx[r * d + j] = scale * (d as f64 * dxh - s1 - xh[j] * s2);
                    }
                }
                acc(grads, *x, &gx);
                acc(grads, *gamma, &gg);
                acc(grads, *beta, &gb);
            }
            Op::Concat { parts, outer, dims, inner } => {
                let total: usize = dims.iter().sum();
                let mut offset = 0;
                for (&p, &d) in parts.iter().zip(dims) {
                    let mut g = Vec::with_capacity(outer * d * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        g.extend_from_slice(&gy[base..base + d * inner]);
                    }
                    acc(grads, p, &g);
                    offset += d;
                }
            }
            Op::Slice { x, outer, dim, inner, start, len } => {
                let mut g = vec![0.0; outer * dim * inner];
                for o in 0..*outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gy[src..src + len * inner]);
                }
                acc(grads, *x, &g);
            }
            Op::GatherRows { x, rows } => {
                let c = self.shape(*x)[1];
                let mut g = vec![0.0; val(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        g[r * c + j] += gy[k * c + j];
                    }
                }
                acc(grads, *x, &g);
            }
            Op::GatherElems { x, idx } => {
                let mut g = vec![0.0; val(*x).len()];
                for (k, &i) in idx.iter().enumerate() {
                    g[i] += gy[k];
                }
                acc(grads, *x, &g);
            }
            Op::Reshape(x) => acc(grads, *x, gy),
            Op::Sum(x) => acc_with(grads, *x, val(*x).len(), |_| gy[0]),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc_with(grads, *x, val(*x).len(), |_| gy[0] / n);
            }
            Op::SumAxis { x, outer, dim, inner } => {
                let mut g = vec![0.0; outer * dim * inner];
                for o in 0..*outer {
                    for d in 0..*dim {
                        for i in 0..*inner {
                            g[(o * dim + d) * inner + i] = gy[o * inner + i];
                        }
                    }
                }
                acc(grads, *x, &g);
            }
            Op::Focal { x, targets, alpha, gamma } => {
                let xv = val(*x);
                acc_with(grads, *x, gy.len(), |k| {
                    gy[k] * focal_elem(xv[k], targets[k], *alpha, *gamma).1
                });
            }
        }
    }
}

fn softmax_forward(x: &[f64], outer: usize, dim: usize, inner: usize, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |d: usize| (o * dim + d) * inner + i;
            let max = (0..dim).map(|d| x[idx(d)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..dim).map(|d| (x[idx(d)] - max).exp()).sum();
            let lse = total.ln();
            for d in 0..dim {
                let shifted = x[idx(d)] - max;
                out[idx(d)] = if log { shifted - lse } else { shifted.exp() / total };
            }
        }
    }
    out
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn acc_with(grads: &mut [Option<Vec<f64>>], v: Var, n: usize, f: impl Fn(usize) -> f64) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().enumerate().for_each(|(k, e)| *e += f(k)),
        slot @ None => *slot = Some((0..n).map(f).collect()),
    }
}
