//! Tape-based reverse-mode differentiation over matrix-valued primitives.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and the backward sweep is a plain reverse scan.
//! Adjoints accumulate in that fixed order, which makes repeated runs
//! bit-identical.

use crate::error::{Error, Result};
use crate::layers::LAYER_NORM_EPS;
use crate::linalg::{softmax_columns, Cholesky, Matrix};

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    /// `aᵀ b`.
    TMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    /// `a + b 1ᵀ` with `b` a column.
    AddColumn(Var, Var),
    Transpose(Var),
    SoftmaxColumns(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    SelectColumns(Var, Vec<usize>),
    ConcatColumns(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Matrix,
        probs: Matrix,
    },
    /// `b a⁻¹` for symmetric positive definite `a`.
    SpdSolveRight {
        b: Var,
        a: Var,
        factor: Cholesky,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v` (zeros if `v` did not
    /// influence the loss).
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.adjoints[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.adjoints[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, grad: Matrix) {
    match slot {
        Some(existing) => {
            existing
                .axpy(1.0, &grad)
                .expect("adjoint shape matches node shape");
        }
        None => *slot = Some(grad),
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

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Tape(format!("variable {} is not on this tape", v.0)))
        }
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn t_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).t_matmul(self.value(b))?;
        Ok(self.push(value, Op::TMatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).scale(s);
        Ok(self.push(value, Op::Scale(a, s), &[a]))
    }

    /// `a + c` entrywise.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).shift(c);
        Ok(self.push(value, Op::Shift(a), &[a]))
    }

    /// Adds the column `b` to every column of `a`.
    pub fn add_column(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape() != (av.rows(), 1) {
            return Err(Error::shape(
                "add_column",
                format!("{:?} + column {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut value = av.clone();
        for c in 0..value.cols() {
            for r in 0..value.rows() {
                value[(r, c)] += bv[(r, 0)];
            }
        }
        Ok(self.push(value, Op::AddColumn(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).transpose();
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn softmax_columns(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = softmax_columns(self.value(a))?;
        Ok(self.push(value, Op::SoftmaxColumns(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).relu();
        Ok(self.push(value, Op::Relu(a), &[a]))
    }

    /// Column-wise layer norm with per-row `gain` and `bias` columns.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let xv = self.value(x);
        let (d, n) = xv.shape();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (d, 1) || b.shape() != (d, 1) {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?}, bias {:?} for {d} rows", g.shape(), b.shape()),
            ));
        }
        let mut normalized = Matrix::zeros(d, n);
        let mut value = Matrix::zeros(d, n);
        let mut inv_std = Vec::with_capacity(n);
        for c in 0..n {
            let col = xv.column(c);
            let mean = col.iter().sum::<f64>() / d as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (r, v) in col.iter().enumerate() {
                let xhat = (v - mean) * inv;
                normalized[(r, c)] = xhat;
                value[(r, c)] = xhat * g[(r, 0)] + b[(r, 0)];
            }
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn select_columns(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).select_columns(idx)?;
        Ok(self.push(value, Op::SelectColumns(a, idx.to_vec()), &[a]))
    }

    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        for p in parts {
            self.check(*p)?;
        }
        let refs: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Matrix::hcat(&refs)?;
        Ok(self.push(value, Op::ConcatColumns(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        for p in parts {
            self.check(*p)?;
        }
        let refs: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Matrix::vcat(&refs)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Mean label-smoothed cross-entropy over the columns of `logits`
    /// (`classes x batch`); the result is `1 x 1`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        let targets = smoothed_targets(lv.rows(), labels, smoothing)?;
        if targets.cols() != lv.cols() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {} logit columns", labels.len(), lv.cols()),
            ));
        }
        let probs = softmax_columns(lv)?;
        let loss = smoothed_cross_entropy_columns(lv, &targets);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        ))
    }

    /// `b a⁻¹` for symmetric positive definite `a`.
    pub fn spd_solve_right(&mut self, b: Var, a: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let factor = Cholesky::new(self.value(a))?;
        let value = factor.solve_right(self.value(b))?;
        Ok(self.push(value, Op::SpdSolveRight { b, a, factor }, &[b, a]))
    }

    /// Reverse sweep from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with(loss, Matrix::filled(1, 1, 1.0))
    }

    /// Vector-Jacobian product: propagates the cotangent `seed` (shaped
    /// like `output`) back to every node.
    pub fn backward_with(&self, output: Var, seed: Matrix) -> Result<Gradients> {
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward_with",
                format!("cotangent {:?} for output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut adj[a.0], g.matmul_t(self.value(*b))?);
                    }
                    if wants(*b) {
                        accumulate(&mut adj[b.0], self.value(*a).t_matmul(&g)?);
                    }
                }
                Op::TMatMul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut adj[a.0], self.value(*b).matmul_t(&g)?);
                    }
                    if wants(*b) {
                        accumulate(&mut adj[b.0], self.value(*a).matmul(&g)?);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut adj[a.0], g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut adj[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut adj[a.0], g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut adj[b.0], g.scale(-1.0));
                    }
                }
                Op::Scale(a, s) => accumulate(&mut adj[a.0], g.scale(*s)),
                Op::Shift(a) => accumulate(&mut adj[a.0], g),
                Op::AddColumn(a, b) => {
                    if wants(*b) {
                        let col = Matrix::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum());
                        accumulate(&mut adj[b.0], col);
                    }
                    if wants(*a) {
                        accumulate(&mut adj[a.0], g);
                    }
                }
                Op::Transpose(a) => accumulate(&mut adj[a.0], g.transpose()),
                Op::SoftmaxColumns(a) => {
                    // per column: s ⊙ (g − (sᵀg) 1)
                    let s = &node.value;
                    let mut out = Matrix::zeros(s.rows(), s.cols());
                    for c in 0..s.cols() {
                        let inner: f64 = (0..s.rows()).map(|r| s[(r, c)] * g[(r, c)]).sum();
                        for r in 0..s.rows() {
                            out[(r, c)] = s[(r, c)] * (g[(r, c)] - inner);
                        }
                    }
                    accumulate(&mut adj[a.0], out);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let out = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                        if x[(r, c)] > 0.0 {
                            g[(r, c)]
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj[a.0], out);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (d, n) = normalized.shape();
                    if wants(*gain) {
                        let dg = Matrix::from_fn(d, 1, |r, _| {
                            (0..n).map(|c| g[(r, c)] * normalized[(r, c)]).sum()
                        });
                        accumulate(&mut adj[gain.0], dg);
                    }
                    if wants(*bias) {
                        let db = Matrix::from_fn(d, 1, |r, _| g.row(r).iter().sum());
                        accumulate(&mut adj[bias.0], db);
                    }
                    if wants(*x) {
                        let mut dx = Matrix::zeros(d, n);
                        for c in 0..n {
                            let mut mean_dxhat = 0.0;
                            let mut mean_dxhat_xhat = 0.0;
                            for r in 0..d {
                                let dxhat = g[(r, c)] * gv[(r, 0)];
                                mean_dxhat += dxhat;
                                mean_dxhat_xhat += dxhat * normalized[(r, c)];
                            }
                            mean_dxhat /= d as f64;
                            mean_dxhat_xhat /= d as f64;
                            for r in 0..d {
                                let dxhat = g[(r, c)] * gv[(r, 0)];
                                dx[(r, c)] = inv_std[c]
                                    * (dxhat - mean_dxhat - normalized[(r, c)] * mean_dxhat_xhat);
                            }
                        }
                        accumulate(&mut adj[x.0], dx);
                    }
                }
                Op::SelectColumns(a, idx) => {
                    let av = self.value(*a);
                    let mut out = Matrix::zeros(av.rows(), av.cols());
                    for (j, &c) in idx.iter().enumerate() {
                        for r in 0..av.rows() {
                            out[(r, c)] += g[(r, j)];
                        }
                    }
                    accumulate(&mut adj[a.0], out);
                }
                Op::ConcatColumns(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        if wants(*p) {
                            let idx: Vec<usize> = (offset..offset + cols).collect();
                            accumulate(&mut adj[p.0], g.select_columns(&idx)?);
                        }
                        offset += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        if wants(*p) {
                            accumulate(&mut adj[p.0], g.row_block(offset, rows)?);
                        }
                        offset += rows;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let batch = probs.cols() as f64;
                    let scale = g[(0, 0)] / batch;
                    let out = probs.sub(targets)?.scale(scale);
                    accumulate(&mut adj[logits.0], out);
                }
                Op::SpdSolveRight { b, a, factor } => {
                    let gb = factor.solve_right(&g)?;
                    if wants(*a) {
                        let ga = node.value.t_matmul(&gb)?.scale(-1.0);
                        accumulate(&mut adj[a.0], ga);
                    }
                    if wants(*b) {
                        accumulate(&mut adj[b.0], gb);
                    }
                }
            }
        }

        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

/// `(1 − s)·onehot + s/C` as a `classes x batch` matrix.
fn smoothed_targets(classes: usize, labels: &[usize], smoothing: f64) -> Result<Matrix> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Invalid(format!("label smoothing must be in [0, 1), got {smoothing}")));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let off = smoothing / classes as f64;
    Ok(Matrix::from_fn(classes, labels.len(), |r, c| {
        if labels[c] == r {
            1.0 - smoothing + off
        } else {
            off
        }
    }))
}

fn smoothed_cross_entropy_columns(logits: &Matrix, targets: &Matrix) -> f64 {
    let (classes, batch) = logits.shape();
    let mut total = 0.0;
    for c in 0..batch {
        let col = logits.column(c);
        let lse = crate::linalg::log_sum_exp(&col);
        for r in 0..classes {
            total -= targets[(r, c)] * (col[r] - lse);
        }
    }
    total / batch as f64
}

/// Mean label-smoothed cross-entropy. `logits` is `batch x classes`, one
/// row per sample, as returned by the forward pass.
pub fn cross_entropy_smoothed(logits: &Matrix, labels: &[usize], smoothing: f64) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "cross_entropy_smoothed",
            format!("{} labels for {} rows of logits", labels.len(), logits.rows()),
        ));
    }
    let cols = logits.transpose();
    let targets = smoothed_targets(cols.rows(), labels, smoothing)?;
    Ok(smoothed_cross_entropy_columns(&cols, &targets))
}
