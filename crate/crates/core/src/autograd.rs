//! A small reverse-mode tape over dense matrices.
//!
//! Graphs are rebuilt per example: push leaves, compose ops, call
//! [`Tape::backward`] on a scalar root. Leaves created with
//! `needs_grad = false` never receive gradients, and no op spends work
//! computing gradients for inputs that do not need them. Layers with their
//! own analytic backward pass (interval-infused attention, the interval
//! embedder) plug in through [`CustomOp`].

use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op whose backward pass is supplied by the caller.
pub trait CustomOp {
    /// Gradients for each input, in the order the inputs were registered.
    /// `None` means "no contribution".
    fn backward(&self, grad_out: &Matrix, inputs: &[&Matrix], needs_grad: &[bool]) -> Vec<Option<Matrix>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Matrix, rstd: Vec<f64> },
    Softmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Rope { x: Var, head_dim: usize },
    RelativeScores { q: Var, table: Var, buckets: Vec<usize> },
    Nll { logits: Var, probs: Vec<f64>, target: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Matrix,
    needs_grad: bool,
    op: Op,
}

pub const MASK_VALUE: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, needs_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Broadcast-adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_row(self.value(bias));
        self.push(value, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b));
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta` (both `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let mut normed = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut value = normed.clone();
        for r in 0..rows {
            for (c, o) in value.row_mut(r).iter_mut().enumerate() {
                *o = *o * g.data()[c] + b.data()[c];
            }
        }
        self.push(value, Op::LayerNorm { x, gamma, beta, normed, rstd }, &[x, gamma, beta])
    }

    /// Row softmax where entry `(r, c)` with `c > r` receives [`MASK_VALUE`].
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let value = causal_softmax(self.value(a));
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Unmasked row softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            value.row_mut(r).copy_from_slice(&softmax(m.row(r)));
        }
        self.push(value, Op::Softmax(a), &[a])
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_cols(&mats);
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_cols(start, len);
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_rows(&mats);
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_rows(start, len);
        self.push(value, Op::SliceRows { x, start }, &[x])
    }

    /// Rotary position encoding applied independently to each head of width
    /// `head_dim`; row index is the position.
    pub fn rope(&mut self, x: Var, head_dim: usize) -> Var {
        let value = rope(self.value(x), head_dim, false);
        self.push(value, Op::Rope { x, head_dim }, &[x])
    }

    /// `out[i][j] = q_i · table[buckets[i * n + j]]` for an `n x n` grid.
    pub fn relative_scores(&mut self, q: Var, table: Var, buckets: &[usize]) -> Var {
        let qm = self.value(q);
        let t = self.value(table);
        let n = qm.rows();
        assert_eq!(buckets.len(), n * n, "relative bucket grid must be n x n");
        let mut value = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let b = buckets[i * n + j];
                value.set(i, j, crate::tensor::dot(qm.row(i), t.row(b)));
            }
        }
        self.push(value, Op::RelativeScores { q, table, buckets: buckets.to_vec() }, &[q, table])
    }

    /// Negative log-softmax of a `1 x V` logit row at `target`.
    pub fn nll(&mut self, logits: Var, target: usize) -> Var {
        let row = self.value(logits);
        assert_eq!(row.rows(), 1, "nll expects a single logit row");
        let probs = softmax(row.data());
        let loss = -log_softmax_at(row.data(), target);
        self.push(Matrix::filled(1, 1, loss), Op::Nll { logits, probs, target }, &[logits])
    }

    pub fn custom(&mut self, value: Matrix, inputs: &[Var], op: Box<dyn CustomOp>) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, inputs)
    }

    /// Back-propagates from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let gb = g.matmul_t(self.value(*b));
                    self.accumulate(grads, *a, gb);
                }
                if self.wants(*b) {
                    let ga = self.value(*a).t_matmul(g);
                    self.accumulate(grads, *b, ga);
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    let ga = g.matmul(self.value(*b));
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g.t_matmul(self.value(*a));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, g.sum_rows());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a)));
                }
            }
            Op::Affine(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = Matrix::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data().iter().zip(g.data()).map(|(&x, &g)| g * gelu_grad(x)).collect(),
                )
                .expect("shape preserved");
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = elementwise(y, g, |y, g| g * (1.0 - y * y));
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = elementwise(y, g, |y, g| g * y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, normed, rstd } => {
                let gm = self.value(*gamma);
                let cols = normed.cols();
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, g.hadamard(normed).sum_rows());
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, g.sum_rows());
                }
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(normed.rows(), cols);
                    for r in 0..normed.rows() {
                        let gr = g.row(r);
                        let nr = normed.row(r);
                        let dxhat: Vec<f64> = gr.iter().zip(gm.data()).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dn = dxhat.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dxhat[c] - mean_d - nr[c] * mean_dn);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - inner);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, w));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.wants(p) {
                        self.accumulate(grads, p, g.slice_rows(offset, h));
                    }
                    offset += h;
                }
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, d);
            }
            Op::Rope { x, head_dim } => {
                self.accumulate(grads, *x, rope(g, *head_dim, true));
            }
            Op::RelativeScores { q, table, buckets } => {
                let qm = self.value(*q);
                let t = self.value(*table);
                let n = qm.rows();
                if self.wants(*q) {
                    let mut dq = Matrix::zeros(n, qm.cols());
                    for i in 0..n {
                        for j in 0..n {
                            let gij = g.get(i, j);
                            if gij != 0.0 {
                                let row = t.row(buckets[i * n + j]);
                                for (o, v) in dq.row_mut(i).iter_mut().zip(row) {
                                    *o += gij * v;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *q, dq);
                }
                if self.wants(*table) {
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for i in 0..n {
                        for j in 0..n {
                            let gij = g.get(i, j);
                            if gij != 0.0 {
                                let b = buckets[i * n + j];
                                for (o, v) in dt.row_mut(b).iter_mut().zip(qm.row(i)) {
                                    *o += gij * v;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::Nll { logits, probs, target } => {
                let scale = g.get(0, 0);
                let mut d = probs.clone();
                d[*target] -= 1.0;
                d.iter_mut().for_each(|x| *x *= scale);
                self.accumulate(grads, *logits, Matrix::row_vector(&d));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Matrix> = inputs.iter().map(|&v| self.value(v)).collect();
                let wants: Vec<bool> = inputs.iter().map(|&v| self.wants(v)).collect();
                let results = op.backward(g, &values, &wants);
                for (&v, r) in inputs.iter().zip(results) {
                    if let Some(r) = r {
                        self.accumulate(grads, v, r);
                    }
                }
            }
        }
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shape preserved")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax_at(xs: &[f64], index: usize) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs[index] - lse
}

/// Row softmax of `scores + M` where `M[r][c] = MASK_VALUE` for `c > r`.
pub fn causal_softmax(scores: &Matrix) -> Matrix {
    let (rows, cols) = scores.shape();
    let mut out = Matrix::zeros(rows, cols);
    let mut buf = vec![0.0; cols];
    for r in 0..rows {
        for (c, b) in buf.iter_mut().enumerate() {
            *b = scores.get(r, c) + if c > r { MASK_VALUE } else { 0.0 };
        }
        out.row_mut(r).copy_from_slice(&softmax(&buf));
    }
    out
}

fn rope(x: &Matrix, head_dim: usize, inverse: bool) -> Matrix {
    assert!(head_dim % 2 == 0 && x.cols() % head_dim == 0, "rope needs even head width");
    let half = head_dim / 2;
    let mut out = x.clone();
    let freqs: Vec<f64> = (0..half).map(|i| 10000f64.powf(-(i as f64) / half as f64)).collect();
    for pos in 0..x.rows() {
        let row = x.row(pos);
        let orow = out.row_mut(pos);
        for head in 0..x.cols() / head_dim {
            let base = head * head_dim;
            for (i, f) in freqs.iter().enumerate() {
                let angle = pos as f64 * f;
                let (s, c) = angle.sin_cos();
                let s = if inverse { -s } else { s };
                let a = row[base + i];
                let b = row[base + half + i];
                orow[base + i] = a * c - b * s;
                orow[base + half + i] = a * s + b * c;
            }
        }
    }
    out
}

/// `out += alpha · a · b` without allocating an intermediate.
pub fn matmul_acc(out: &mut Matrix, alpha: f64, a: &Matrix, b: &Matrix) {
    gemm(alpha, a, false, b, false, 1.0, out);
}
