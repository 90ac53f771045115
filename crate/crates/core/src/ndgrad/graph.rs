//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is a single reverse sweep.
//!
//! Binary elementwise ops accept identical shapes, or one operand whose shape
//! equals the other's shape without its leading axis (a per-row broadcast,
//! e.g. a bias vector added to a batch).

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Where(Vec<bool>, Var, Var),
    LogSoftmax(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather",
            Op::Where(..) => "where",
            Op::LogSoftmax(..) => "log_softmax",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation graph. Build one per minibatch.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// How two operand shapes combine in an elementwise op.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || (!a.is_empty() && &a[1..] == b) {
        Ok(a.to_vec())
    } else if !b.is_empty() && &b[1..] == a {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, format!("{a:?} vs {b:?}")))
    }
}

/// Sums `g` down to `len` trailing elements (undoing a leading-axis broadcast).
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks_exact(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
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

    fn unary(&mut self, op: Op, x: Var, value: Tensor) -> Var {
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, op, ng)
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(name, va.shape(), vb.shape())?;
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let (la, lb) = (da.len(), db.len());
        let data: Vec<f64> = (0..n).map(|i| f(da[i % la], db[i % lb])).collect();
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(Tensor::new(shape, data)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a [m x k] @ b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] @ [{k2}, {n}]")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a, b), ng))
    }

    /// `a [m x k] @ b^T` with `b` of shape `[n x k]`; the layout of a linear
    /// layer whose weight is stored `[out x in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}, {k}] @ [{n}, {k2}]^T")));
        }
        let data = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.matrix_dims("transpose", x)?;
        let v = self.value(x).transpose();
        Ok(self.unary(Op::Transpose(x), x, v))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x).map(f);
        self.unary(op, x, v)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, Op::LeakyRelu(x, slope), |v| leaky_relu(v, slope))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus(x), softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.map(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(Op::Sum(x), x, Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.unary(Op::Mean(x), x, Tensor::scalar(s))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat", p)?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "row counts differ: {:?}",
                        parts.iter().map(|&q| self.shape(q).to_vec()).collect::<Vec<_>>()
                    ),
                ));
            }
            widths.push(c);
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(Tensor::matrix(rows, total, data)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice", x)?;
        if start > end || end > c {
            return Err(Error::shape("slice", format!("columns {start}..{end} of [{r}, {c}]")));
        }
        let cols: Vec<usize> = (start..end).collect();
        let v = self.value(x).select_columns(&cols);
        Ok(self.unary(Op::SliceCols(x, start), x, v))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.unary(Op::Reshape(x), x, v))
    }

    /// Picks elements of the flattened source: `out[i] = src.flat[idx[i]]`.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let d = self.value(src).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= d.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of bounds for {} elements", d.len()),
            ));
        }
        let data = idx.iter().map(|&i| d[i]).collect();
        Ok(self.unary(Op::Gather(src, idx.to_vec()), src, Tensor::vector(data)))
    }

    /// Elementwise select: `mask[i] ? a[i] : b[i]`.
    pub fn where_(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || mask.len() != va.len() {
            return Err(Error::shape(
                "where",
                format!("mask {} vs {:?} / {:?}", mask.len(), va.shape(), vb.shape()),
            ));
        }
        let data = mask
            .iter()
            .zip(va.data().iter().zip(vb.data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(v, Op::Where(mask.to_vec(), a, b), ng))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("log_softmax", x)?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * c);
        for row in src.chunks_exact(c.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let v = Tensor::matrix(r, c, data)?;
        Ok(self.unary(Op::LogSoftmax(x), x, v))
    }

    /// Reverse sweep from a scalar root. Gradients of earlier calls are
    /// discarded first, so repeated calls give identical results.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0])?);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape();
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let la = self.value(*a).len();
                let lb = self.value(*b).len();
                self.accumulate(grads, *a, reduce_to(gd, la));
                let gb: Vec<f64> = gd.iter().map(|v| sign * v).collect();
                self.accumulate(grads, *b, reduce_to(&gb, lb));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let (la, lb) = (da.len(), db.len());
                if self.nodes[a.0].needs_grad {
                    let ga: Vec<f64> = gd.iter().enumerate().map(|(k, v)| v * db[k % lb]).collect();
                    self.accumulate(grads, *a, reduce_to(&ga, la));
                }
                if self.nodes[b.0].needs_grad {
                    let gb: Vec<f64> = gd.iter().enumerate().map(|(k, v)| v * da[k % la]).collect();
                    self.accumulate(grads, *b, reduce_to(&gb, lb));
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let (la, lb) = (da.len(), db.len());
                if self.nodes[a.0].needs_grad {
                    let ga: Vec<f64> = gd.iter().enumerate().map(|(k, v)| v / db[k % lb]).collect();
                    self.accumulate(grads, *a, reduce_to(&ga, la));
                }
                if self.nodes[b.0].needs_grad {
                    let gb: Vec<f64> = gd
                        .iter()
                        .enumerate()
                        .map(|(k, v)| {
                            let y = db[k % lb];
                            -v * da[k % la] / (y * y)
                        })
                        .collect();
                    self.accumulate(grads, *b, reduce_to(&gb, lb));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, matmul_nt_raw(gd, vb.data(), m, n, k));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, matmul_tn_raw(va.data(), gd, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, matmul_raw(gd, vb.data(), m, n, k));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, matmul_tn_raw(gd, va.data(), m, n, k));
                }
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, g.transpose().into_data());
            }
            Op::LeakyRelu(x, slope) => {
                let dx = self.value(*x).data();
                let gx = gd
                    .iter()
                    .zip(dx)
                    .map(|(v, &xv)| if xv > 0.0 { *v } else { v * slope })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let dx = self.value(*x).data();
                let gx = gd.iter().zip(dx).map(|(v, &xv)| v * sigmoid(xv)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = gd.iter().zip(out).map(|(v, &s)| v * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = gd.iter().zip(out).map(|(v, &y)| v * y).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let dx = self.value(*x).data();
                let gx = gd.iter().zip(dx).map(|(v, &xv)| v / xv).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let dx = self.value(*x).data();
                let gx = gd.iter().zip(dx).map(|(v, &xv)| 2.0 * xv * v).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let gx = gd.iter().zip(out).map(|(v, &y)| v / (2.0 * y)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Neg(x) => {
                self.accumulate(grads, *x, gd.iter().map(|v| -v).collect());
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, gd.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(x) => {
                self.accumulate(grads, *x, gd.to_vec());
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0] / n as f64; n]);
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let src = self.value(*x);
                let (rows, width) = (src.rows(), src.cols());
                let w = g.cols();
                let mut gx = vec![0.0; rows * width];
                for r in 0..rows {
                    gx[r * width + start..r * width + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gd.to_vec());
            }
            Op::Gather(src, idx) => {
                let mut gx = vec![0.0; self.value(*src).len()];
                for (v, &j) in gd.iter().zip(idx) {
                    gx[j] += v;
                }
                self.accumulate(grads, *src, gx);
            }
            Op::Where(mask, a, b) => {
                let ga = gd.iter().zip(mask).map(|(v, &m)| if m { *v } else { 0.0 }).collect();
                let gb = gd.iter().zip(mask).map(|(v, &m)| if m { 0.0 } else { *v }).collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::LogSoftmax(x) => {
                let c = g.cols().max(1);
                let mut gx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks_exact(c).zip(out.chunks_exact(c)) {
                    let s: f64 = grow.iter().sum();
                    gx.extend(grow.iter().zip(yrow).map(|(gv, y)| gv - y.exp() * s));
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}
