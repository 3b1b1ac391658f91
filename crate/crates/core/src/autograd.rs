//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly (values are computed when the
//! node is created) and [`Graph::backward`] walks the tape in reverse.
//! Parameters are borrowed for the lifetime of the graph and keyed by
//! address, so binding the same matrix twice yields the same [`Var`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use crate::tensor::{sigmoid, Matrix};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Matrix),
    Borrowed(&'a Matrix),
}

impl Deref for Value<'_> {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    OneMinus(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    RowNormalize(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    FrobNorm(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    SoftmaxXent { logits: Var, targets: Matrix, probs: Matrix },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by [`Graph::batch_norm`] in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, the one used for normalization.
    pub var: Vec<f64>,
    pub batch: usize,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: BTreeMap<usize, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: BTreeMap<usize, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter bound through [`Graph::param`]. Parameters that
    /// were bound but did not influence the output get `None`.
    pub fn param(&self, m: &Matrix) -> Option<&Matrix> {
        let v = self.params.get(&(m as *const Matrix as usize))?;
        self.get(*v)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    /// A value that takes part in differentiation (an input we want gradients for).
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// A value treated as constant: no gradient flows into it.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, m: &'a Matrix) -> Var {
        self.nodes.push(Node { value: Value::Borrowed(m), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Binds a borrowed parameter matrix. Repeated binds return the same node.
    pub fn param(&mut self, m: &'a Matrix) -> Var {
        let key = m as *const Matrix as usize;
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        self.nodes.push(Node { value: Value::Borrowed(m), op: Op::Leaf, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulNt(a, b), rg)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_tn(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulTn(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let am = self.value(a);
        let r = self.value(row);
        assert_eq!(r.shape(), (1, am.cols()), "add_row expects a 1 x cols row");
        let mut out = am.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.as_slice()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let v = self.value(a).zip_map(c, |x, y| x + y);
        let rg = self.rg(a);
        self.push(v, Op::AddConst(a), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Multiplies every row of `a` element-wise by the `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let am = self.value(a);
        let r = self.value(row);
        assert_eq!(r.shape(), (1, am.cols()), "mul_row expects a 1 x cols row");
        let mut out = am.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.as_slice()) {
                *o *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    /// Multiplies row `i` of `a` by entry `i` of the `r × 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let am = self.value(a);
        let c = self.value(col);
        assert_eq!(c.shape(), (am.rows(), 1), "mul_col expects a rows x 1 column");
        let mut out = am.clone();
        for i in 0..out.rows() {
            let s = c.as_slice()[i];
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    /// Element-wise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        let rg = self.rg(a);
        self.push(v, Op::MulConst(a, c), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// `1 − a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 - x);
        let rg = self.rg(a);
        self.push(v, Op::OneMinus(a), rg)
    }

    /// Vertical concatenation.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Horizontal concatenation.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows(), "slice_rows out of range");
        let c = m.cols();
        let v = Matrix::from_vec(len, c, m.as_slice()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(a);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshaped(rows, cols);
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Mean over rows, giving a `1 × c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    /// Sum of all entries as a `1 × 1` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    /// L2-normalizes each row; norms are clamped below at `eps`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let n = crate::tensor::l2_norm(m.row(i)).max(eps);
            norms.push(n);
            for x in out.row_mut(i) {
                *x /= n;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::RowNormalize(a, norms), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let c = m.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(m.row(i));
        }
        let rg = self.rg(a);
        self.push(Matrix::from_vec(idx.len(), c, data), Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Frobenius norm as a `1 × 1` scalar.
    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.value(a).frobenius_norm()]);
        let rg = self.rg(a);
        self.push(v, Op::FrobNorm(a), rg)
    }

    /// Batch normalization over rows using the batch's own statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xm = self.value(x);
        let (b, c) = xm.shape();
        let mean = xm.mean_rows().into_vec();
        let mut var = vec![0.0; c];
        for i in 0..b {
            for (j, v) in xm.row(i).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= b as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let xhat = Matrix::from_fn(b, c, |i, j| (xm.get(i, j) - mean[j]) * inv_std[j]);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let y = Matrix::from_fn(b, c, |i, j| xhat.get(i, j) * g.as_slice()[j] + bt.as_slice()[j]);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = BatchStats { mean, var, batch: b };
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg);
        (v, stats)
    }

    /// `Σ_rows −Σ_k targets · log_softmax(logits)`, as a `1 × 1` scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Matrix) -> Var {
        let l = self.value(logits);
        assert_eq!(l.shape(), targets.shape(), "targets must match logits");
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut total = 0.0;
        for i in 0..l.rows() {
            let row = l.row(i);
            let lse = log_sum_exp(row);
            let z = targets.row(i);
            for (j, &x) in row.iter().enumerate() {
                let logp = x - lse;
                probs.set(i, j, libm::exp(logp));
                if z[j] != 0.0 {
                    total -= z[j] * logp;
                }
            }
        }
        let rg = self.rg(logits);
        self.push(Matrix::from_vec(1, 1, vec![total]), Op::SoftmaxXent { logits, targets, probs }, rg)
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, d: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::MatMulTn(a, b) => {
                // y = aᵀ b: da = b gᵀ, db = a g
                if self.rg(*a) {
                    acc(*a, self.value(*b).matmul_nt(g));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).matmul(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.rg(*row) {
                    acc(*row, g.mean_rows().map(|x| x * g.rows() as f64));
                }
            }
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                let am = self.value(*a);
                if self.rg(*a) {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        for (x, s) in d.row_mut(i).iter_mut().zip(r.as_slice()) {
                            *x *= s;
                        }
                    }
                    acc(*a, d);
                }
                if self.rg(*row) {
                    let mut d = vec![0.0; r.cols()];
                    for i in 0..g.rows() {
                        for (j, dj) in d.iter_mut().enumerate() {
                            *dj += g.get(i, j) * am.get(i, j);
                        }
                    }
                    acc(*row, Matrix::row_vector(d));
                }
            }
            Op::MulCol(a, col) => {
                let c = self.value(*col);
                let am = self.value(*a);
                if self.rg(*a) {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        let s = c.as_slice()[i];
                        for x in d.row_mut(i) {
                            *x *= s;
                        }
                    }
                    acc(*a, d);
                }
                if self.rg(*col) {
                    let d: Vec<f64> = (0..g.rows()).map(|i| crate::tensor::dot(g.row(i), am.row(i))).collect();
                    acc(*col, Matrix::from_vec(g.rows(), 1, d));
                }
            }
            Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, y| x * y)),
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|x| x * c));
            }
            Op::Sigmoid(a) => {
                let y = &*node.value;
                acc(*a, g.zip_map(y, |d, s| d * s * (1.0 - s)));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |d, v| if v > 0.0 { d } else { 0.0 }));
            }
            Op::OneMinus(a) => acc(*a, g.map(|x| -x)),
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.rg(p) {
                        acc(p, Matrix::from_vec(r, c, g.as_slice()[off * c..(off + r) * c].to_vec()));
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let d = Matrix::from_fn(g.rows(), w, |i, j| g.get(i, off + j));
                        acc(p, d);
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let am = self.value(*a);
                let mut d = Matrix::zeros(am.rows(), am.cols());
                let c = am.cols();
                d.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, g.clone().reshaped(r, c));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).shape();
                let inv = 1.0 / r as f64;
                acc(*a, Matrix::from_fn(r, c, |_, j| g.get(0, j) * inv));
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::RowNormalize(a, norms) => {
                let y = &*node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let n = norms[i];
                    let clamped = crate::tensor::l2_norm(self.value(*a).row(i)) < n;
                    let proj = if clamped { 0.0 } else { crate::tensor::dot(yr, gr) };
                    for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                        *out = (gr[j] - yr[j] * proj) / n;
                    }
                }
                acc(*a, d);
            }
            Op::GatherRows(a, idx_list) => {
                let am = self.value(*a);
                let mut d = Matrix::zeros(am.rows(), am.cols());
                for (k, &i) in idx_list.iter().enumerate() {
                    for (o, x) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                acc(*a, d);
            }
            Op::FrobNorm(a) => {
                let n = node.value.as_slice()[0];
                let s = if n > 0.0 { g.get(0, 0) / n } else { 0.0 };
                acc(*a, self.value(*a).map(|x| x * s));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (b, c) = xhat.shape();
                let gm = self.value(*gamma);
                if self.rg(*gamma) {
                    let d: Vec<f64> = (0..c).map(|j| (0..b).map(|i| g.get(i, j) * xhat.get(i, j)).sum()).collect();
                    acc(*gamma, Matrix::row_vector(d));
                }
                if self.rg(*beta) {
                    let d: Vec<f64> = (0..c).map(|j| (0..b).map(|i| g.get(i, j)).sum()).collect();
                    acc(*beta, Matrix::row_vector(d));
                }
                if self.rg(*x) {
                    let bf = b as f64;
                    let mut d = Matrix::zeros(b, c);
                    for j in 0..c {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for i in 0..b {
                            let dxh = g.get(i, j) * gm.as_slice()[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat.get(i, j);
                        }
                        for i in 0..b {
                            let dxh = g.get(i, j) * gm.as_slice()[j];
                            let v = inv_std[j] / bf * (bf * dxh - sum_dxh - xhat.get(i, j) * sum_dxh_xh);
                            d.set(i, j, v);
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let s = g.get(0, 0);
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for i in 0..probs.rows() {
                    let zsum: f64 = targets.row(i).iter().sum();
                    for j in 0..probs.cols() {
                        d.set(i, j, s * (probs.get(i, j) * zsum - targets.get(i, j)));
                    }
                }
                acc(*logits, d);
            }
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + libm::log(row.iter().map(|&x| libm::exp(x - m)).sum::<f64>())
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numerical_gradient(x: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + step;
        let up = f(&probe);
        probe.as_mut_slice()[k] = orig - step;
        let down = f(&probe);
        probe.as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (up - down) / (2.0 * step);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are tiny.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = analytic.zip_map(numeric, |a, b| a - b).frobenius_norm();
    let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(x: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let numeric = numerical_gradient(&x, 1e-5, |p| {
            let mut g = Graph::new();
            let v = g.leaf(p.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}: {analytic:?} vs {numeric:?}");
    }

    fn sample(r: usize, c: usize, seed: u64) -> Matrix {
        let mut s = seed;
        Matrix::from_fn(r, c, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn matmul_family_gradients() {
        let b = sample(4, 3, 7);
        check(sample(2, 4, 1), |g, v| {
            let c = g.constant(b.clone());
            let y = g.matmul(v, c);
            let y = g.sigmoid(y);
            g.sum(y)
        });
        check(sample(2, 3, 2), |g, v| {
            let c = g.constant(b.clone());
            let y = g.matmul_nt(v, c);
            let y = g.mul(y, y);
            g.sum(y)
        });
        check(sample(4, 2, 3), |g, v| {
            let c = g.constant(b.clone());
            let y = g.matmul_tn(c, v);
            let y = g.mul(y, y);
            g.sum(y)
        });
    }

    #[test]
    fn broadcast_and_structural_gradients() {
        let m = sample(3, 4, 11);
        check(sample(1, 4, 5), |g, v| {
            let a = g.constant(m.clone());
            let y = g.mul_row(a, v);
            let y = g.add_row(y, v);
            let y = g.concat_rows(&[y, v]);
            let y = g.mean_rows(y);
            let y = g.mul(y, y);
            g.sum(y)
        });
        check(sample(3, 1, 6), |g, v| {
            let a = g.constant(m.clone());
            let y = g.mul_col(a, v);
            let s = g.slice_rows(y, 1, 2);
            let s = g.reshape(s, 1, 8);
            let s = g.concat_cols(&[s, s]);
            let s = g.one_minus(s);
            let s = g.mul(s, s);
            g.sum(s)
        });
        check(sample(3, 4, 9), |g, v| {
            let y = g.gather_rows(v, &[2, 0, 2]);
            let y = g.row_normalize(y, 1e-12);
            let w = g.constant(sample(3, 4, 10));
            let y = g.mul(y, w);
            g.sum(y)
        });
    }

    #[test]
    fn norm_batchnorm_and_xent_gradients() {
        check(sample(3, 2, 21), |g, v| {
            let gram = g.matmul_nt(v, v);
            let y = g.add_const(gram, &Matrix::identity(3).map(|x| -x));
            g.frobenius_norm(y)
        });
        let gamma = sample(1, 3, 30);
        let beta = sample(1, 3, 31);
        let w = sample(4, 3, 32);
        check(sample(4, 3, 22), |g, v| {
            let ga = g.constant(gamma.clone());
            let be = g.constant(beta.clone());
            let (y, _) = g.batch_norm(v, ga, be, 1e-5);
            let c = g.constant(w.clone());
            let y = g.mul(y, c);
            let y = g.relu(y);
            g.sum(y)
        });
        let targets = Matrix::from_rows(&[alloc::vec![0.7, 0.1, 0.2], alloc::vec![0.0, 1.0, 0.0]]);
        check(sample(2, 3, 23), |g, v| {
            let s = g.scale(v, 3.0);
            g.softmax_cross_entropy(s, targets.clone())
        });
    }

    #[test]
    fn params_are_deduplicated_by_address() {
        let w = sample(2, 2, 40);
        let mut g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let s = g.sum(y);
        let grads = g.backward(s);
        let expected = w.map(|x| 2.0 * x);
        assert!(grads.param(&w).unwrap().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(sample(2, 2, 1));
        let l = g.leaf(sample(2, 2, 2));
        let y = g.mul(c, l);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert!(grads.get(l).is_some());
    }
}
