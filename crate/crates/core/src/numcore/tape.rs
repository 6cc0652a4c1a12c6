//! Eager reverse-mode autodiff over rank-2 tensors.
//!
//! Every op computes its value immediately and appends a node. Node indices
//! increase in creation order, which is already a topological order, so
//! `backward` is a single reverse sweep that visits each node once.

use super::tensor::kernels;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SoftmaxRows(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNormRows {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    SumAll(Var),
    Clamp(Var, Vec<bool>),
    Mse(Var, Vec<f64>),
    BceWithLogits(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<(ParamId, Var)>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient w.r.t. a node, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter that was read on the tape and requires grad.
    pub fn params(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g.clone())))
            .collect()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("internal shape")
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
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

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input leaf whose gradient is kept (used for saliency).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Reads a parameter onto the tape. Repeated reads return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some((_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.param_vars.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2();
        let (k2, n) = bv.dims2();
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(av.data(), bv.data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(m, n, out), Op::MatMul(a, b), ng))
    }

    /// a · bᵀ without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2();
        let (n, k2) = bv.dims2();
        if k != k2 {
            return Err(shape_err("matmul_nt", av, bv));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(av.data(), bv.data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(m, n, out), Op::MatMulNt(a, b), ng))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims2() != bv.dims2() {
            return Err(shape_err(op, av, bv));
        }
        Ok(av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same(a, b, "add", |x, y| x + y)?;
        let (r, c) = self.value(a).dims2();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(r, c, data), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let (r, c) = self.value(a).dims2();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(r, c, data), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let (r, c) = self.value(a).dims2();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(r, c, data), Op::Mul(a, b), ng))
    }

    /// `a[m,n] + row[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (m, n) = av.dims2();
        if rv.dims2() != (1, n) {
            return Err(shape_err("add_row", av, rv));
        }
        let r = rv.data();
        let data = av
            .data()
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, b)| x + b))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(mat(m, n, data), Op::AddRow(a, row), ng))
    }

    /// `a[m,n] ⊙ row[1,n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (m, n) = av.dims2();
        if rv.dims2() != (1, n) {
            return Err(shape_err("mul_row", av, rv));
        }
        let r = rv.data();
        let data = av
            .data()
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, b)| x * b))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(mat(m, n, data), Op::MulRow(a, row), ng))
    }

    /// `a[m,n] ⊙ col[m,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        let (m, n) = av.dims2();
        if cv.dims2() != (m, 1) {
            return Err(shape_err("mul_col", av, cv));
        }
        let c = cv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(idx, x)| x * c[idx / n.max(1)])
            .collect();
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(mat(m, n, data), Op::MulCol(a, col), ng))
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.dims2() != c.dims2() {
            return Err(shape_err("add_const", av, c));
        }
        let (r, cols) = av.dims2();
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let ng = self.ng(a);
        Ok(self.push(mat(r, cols, data), Op::AddConst(a), ng))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.dims2() != c.dims2() {
            return Err(shape_err("mul_const", av, c));
        }
        let (r, cols) = av.dims2();
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let ng = self.ng(a);
        Ok(self.push(mat(r, cols, data), Op::MulConst(a, c.data().to_vec()), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let data = av.data().iter().map(|x| x * k).collect();
        let ng = self.ng(a);
        self.push(mat(r, c, data), Op::Scale(a, k), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(t, Op::Transpose(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("concat of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(mat(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(mat(rows, cols, data), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2();
        if start + len > r {
            return Err(Error::Shape {
                op: "slice_rows",
                left: av.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let data = av.data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(mat(len, c, data), Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2();
        if start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: av.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av.data()[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(mat(r, len, data), Op::SliceCols(a, start), ng))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2();
        if let Some(bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                left: av.shape().to_vec(),
                right: vec![*bad],
            });
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(av.row_slice(i));
        }
        let ng = self.ng(a);
        Ok(self.push(
            mat(indices.len(), c, data),
            Op::GatherRows(a, indices.to_vec()),
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).clone().reshape(vec![rows, cols])?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Row-wise softmax, max-shifted.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let ng = self.ng(a);
        self.push(mat(r, c, data), Op::SoftmaxRows(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let data = av.data().iter().map(|x| f(*x)).collect();
        let ng = self.ng(a);
        self.push(mat(r, c, data), op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = av.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let ng = self.ng(a);
        self.push(
            mat(r, c, xhat.clone()),
            Op::LayerNormRows {
                x: a,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Mean over rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(av.row_slice(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r.max(1) as f64);
        let ng = self.ng(a);
        self.push(mat(1, c, out), Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Elementwise projection onto `[lo, hi]`; gradient passes only where
    /// the value was strictly inside.
    pub fn clamp(&mut self, a: Var, lo: &[f64], hi: &[f64]) -> Result<Var> {
        let av = self.value(a);
        if lo.len() != av.len() || hi.len() != av.len() {
            return Err(Error::Shape {
                op: "clamp",
                left: av.shape().to_vec(),
                right: vec![lo.len(), hi.len()],
            });
        }
        let (r, c) = av.dims2();
        let mut pass = Vec::with_capacity(av.len());
        let mut data = Vec::with_capacity(av.len());
        for ((x, l), h) in av.data().iter().zip(lo).zip(hi) {
            let y = x.max(*l).min(*h);
            pass.push(y == *x);
            data.push(y);
        }
        let ng = self.ng(a);
        Ok(self.push(mat(r, c, data), Op::Clamp(a, pass), ng))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: &[f64]) -> Result<Var> {
        let av = self.value(a);
        if av.len() != target.len() {
            return Err(Error::Shape {
                op: "mse",
                left: av.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let n = target.len().max(1) as f64;
        let loss = av
            .data()
            .iter()
            .zip(target)
            .map(|(x, t)| (x - t).powi(2))
            .sum::<f64>()
            / n;
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, target.to_vec()), ng))
    }

    /// Mean binary cross-entropy on logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let av = self.value(logits);
        if av.len() != targets.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                left: av.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let n = targets.len().max(1) as f64;
        let loss = av
            .data()
            .iter()
            .zip(targets)
            .map(|(z, y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits(logits, targets.to_vec()),
            ng,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: lv.shape().to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.param_vars.clone(),
        })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = node.value.dims2();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = cols;
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    self.acc(grads, *a, |ga| kernels::matmul_nt(g, bv, ga, m, n, k));
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    self.acc(grads, *b, |gb| kernels::matmul_tn(av, g, gb, k, m, n));
                }
            }
            Op::MatMulNt(a, b) => {
                // c[m,n] = a[m,k] b[n,k]ᵀ
                let (m, k) = self.value(*a).dims2();
                let n = cols;
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    self.acc(grads, *a, |ga| kernels::matmul(g, bv, ga, m, n, k));
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    self.acc(grads, *b, |gb| kernels::matmul_tn(g, av, gb, n, m, k));
                }
            }
            Op::Add(a, b) => {
                self.acc_each(grads, *a, g, |gi, _| gi);
                self.acc_each(grads, *b, g, |gi, _| gi);
            }
            Op::Sub(a, b) => {
                self.acc_each(grads, *a, g, |gi, _| gi);
                self.acc_each(grads, *b, g, |gi, _| -gi);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_each(grads, *a, g, |gi, idx| gi * bv[idx]);
                self.acc_each(grads, *b, g, |gi, idx| gi * av[idx]);
            }
            Op::AddRow(a, row) => {
                self.acc_each(grads, *a, g, |gi, _| gi);
                if self.ng(*row) {
                    self.acc(grads, *row, |gr| {
                        for chunk in g.chunks(cols.max(1)) {
                            for (o, x) in gr.iter_mut().zip(chunk) {
                                *o += x;
                            }
                        }
                    });
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row).data();
                self.acc_each(grads, *a, g, |gi, idx| gi * rv[idx % cols]);
                if self.ng(*row) {
                    let av = self.value(*a).data();
                    self.acc(grads, *row, |gr| {
                        for (idx, gi) in g.iter().enumerate() {
                            gr[idx % cols] += gi * av[idx];
                        }
                    });
                }
            }
            Op::MulCol(a, col) => {
                let cv = self.value(*col).data();
                self.acc_each(grads, *a, g, |gi, idx| gi * cv[idx / cols]);
                if self.ng(*col) {
                    let av = self.value(*a).data();
                    self.acc(grads, *col, |gc| {
                        for (idx, gi) in g.iter().enumerate() {
                            gc[idx / cols] += gi * av[idx];
                        }
                    });
                }
            }
            Op::AddConst(a) => self.acc_each(grads, *a, g, |gi, _| gi),
            Op::MulConst(a, c) => self.acc_each(grads, *a, g, |gi, idx| gi * c[idx]),
            Op::Scale(a, k) => self.acc_each(grads, *a, g, |gi, _| gi * k),
            Op::Transpose(a) => {
                // node is [rows, cols] = aᵀ
                self.acc(grads, *a, |ga| {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[j * rows + i] += g[i * cols + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    let slice = &g[offset..offset + n];
                    self.acc_each(grads, *p, slice, |gi, _| gi);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col0 = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if self.ng(*p) {
                        self.acc(grads, *p, |gp| {
                            for r in 0..rows {
                                for j in 0..pc {
                                    gp[r * pc + j] += g[r * cols + col0 + j];
                                }
                            }
                        });
                    }
                    col0 += pc;
                }
            }
            Op::SliceRows(a, start) => {
                let off = start * cols;
                self.acc(grads, *a, |ga| {
                    for (o, x) in ga[off..off + g.len()].iter_mut().zip(g) {
                        *o += x;
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let ac = self.value(*a).cols();
                self.acc(grads, *a, |ga| {
                    for r in 0..rows {
                        for j in 0..cols {
                            ga[r * ac + start + j] += g[r * cols + j];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                self.acc(grads, *a, |ga| {
                    for (k, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            ga[src * cols + j] += g[k * cols + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc_each(grads, *a, g, |gi, _| gi),
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                self.acc(grads, *a, |ga| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc_each(grads, *a, g, |gi, idx| if x[idx] > 0.0 { gi } else { 0.0 });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.acc_each(grads, *a, g, |gi, idx| gi * (1.0 - y[idx] * y[idx]));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.acc_each(grads, *a, g, |gi, idx| gi * y[idx] * (1.0 - y[idx]));
            }
            Op::LayerNormRows { x, xhat, inv_std } => {
                let n = cols as f64;
                self.acc(grads, *x, |gx| {
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..cols {
                            gx[r * cols + j] += inv_std[r] * (gr[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let ar = self.value(*a).rows().max(1);
                let inv = 1.0 / ar as f64;
                self.acc_each(grads, *a, &vec![0.0; ar * cols], |_, idx| {
                    g[idx % cols] * inv
                });
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.acc_each(grads, *a, &vec![0.0; n], |_, _| g[0]);
            }
            Op::Clamp(a, pass) => {
                self.acc_each(grads, *a, g, |gi, idx| if pass[idx] { gi } else { 0.0 });
            }
            Op::Mse(a, target) => {
                let x = self.value(*a).data();
                let k = 2.0 * g[0] / target.len().max(1) as f64;
                self.acc_each(grads, *a, &vec![0.0; x.len()], |_, idx| {
                    k * (x[idx] - target[idx])
                });
            }
            Op::BceWithLogits(a, targets) => {
                let z = self.value(*a).data();
                let k = g[0] / targets.len().max(1) as f64;
                self.acc_each(grads, *a, &vec![0.0; z.len()], |_, idx| {
                    k * (sigmoid(z[idx]) - targets[idx])
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    /// Accumulates `h(g[idx], idx)` elementwise into `v`'s gradient.
    fn acc_each(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        h: impl Fn(f64, usize) -> f64,
    ) {
        self.acc(grads, v, |gv| {
            for (idx, (o, gi)) in gv.iter_mut().zip(g).enumerate() {
                *o += h(*gi, idx);
            }
        });
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_closed_form() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0), true).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let sq = tape.mul(wv, wv).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(wv).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![0.3, -1.2, 2.0, 0.0]));
        let s = tape.softmax_rows(x);
        let total = tape.sum_all(s);
        assert!((tape.scalar(total) - 1.0).abs() < 1e-12);
        let g = tape.backward(total).unwrap();
        assert!(g.get(x).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0), false).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let x = tape.input(Tensor::scalar(5.0));
        let y = tape.mul(wv, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(wv).is_none());
        assert_eq!(g.get(x).unwrap(), &[2.0]);
        assert!(g.params().is_empty());
    }

    #[test]
    fn repeated_param_reads_share_a_node() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0), true).unwrap();
        let mut tape = Tape::new();
        assert_eq!(tape.param(&store, w), tape.param(&store, w));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::row(vec![800.0, -800.0]));
        let l = tape.bce_with_logits(z, &[1.0, 0.0]).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
    }
}
