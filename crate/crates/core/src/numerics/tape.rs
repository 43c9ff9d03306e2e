//! Reverse-mode gradient tape over the small fixed set of primitives the
//! contrastive loss needs.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use std::collections::BTreeMap;

use super::matrix::{self, dot, norm, DenseMatrix, NORM_EPS};
use crate::error::{Error, Result};

/// Floor applied to probabilities inside `ln` by the KL primitive.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a trainable parameter within a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    NormalizeRows { input: Var, norms: Vec<f64> },
    /// `a · exp(s)` with `s` a `1 x 1` value.
    ScaleByExp(Var, Var),
    Scale(Var, f64),
    Add(Var, Var),
    SoftmaxRows(Var),
    /// Row-mean of `KL(target_row ‖ p_row)`; `target` is a constant.
    KlRowMean { p: Var, target: DenseMatrix },
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
}

/// Gradients of a scalar root with respect to each recorded parameter.
pub type Gradients = BTreeMap<ParamId, DenseMatrix>;

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId, value: DenseMatrix) -> Var {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul_transposed(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Adds a `1 x cols` bias to every row.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {}x{} for {}x{} input", b.rows(), b.cols(), x.rows(), x.cols()),
            ));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        Ok(self.push(value, Op::AddRowBias(a, bias)))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let norms: Vec<f64> = (0..x.rows()).map(|r| norm(x.row(r))).collect();
        if let Some(row) = norms.iter().position(|&n| !(n > NORM_EPS)) {
            return Err(Error::DegenerateRow { row, eps: NORM_EPS });
        }
        let value = matrix::l2_normalize_rows(x)?;
        Ok(self.push(value, Op::NormalizeRows { input: a, norms }))
    }

    pub fn scale_by_exp(&mut self, a: Var, log_scale: Var) -> Result<Var> {
        let s = self
            .value(log_scale)
            .as_scalar()
            .ok_or_else(|| Error::shape("scale_by_exp", "log scale must be 1x1"))?;
        let factor = s.exp();
        let value = self.value(a).map(|x| x * factor);
        value.check_finite("scale_by_exp output")?;
        Ok(self.push(value, Op::ScaleByExp(a, log_scale)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("add", "operands differ in shape"));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = matrix::softmax_rows(self.value(a))?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// `(1/N) Σ_j Σ_k T[j][k] (ln T[j][k] − ln max(P[j][k], floor))` with
    /// `0 · ln 0 = 0`. Produces a `1 x 1` value.
    pub fn kl_row_mean(&mut self, target: DenseMatrix, p: Var) -> Result<Var> {
        let value = kl_row_mean(&target, self.value(p))?;
        Ok(self.push(DenseMatrix::scalar(value)?, Op::KlRowMean { p, target }))
    }

    /// Reverse sweep from a scalar root. Accumulators start at zero on every
    /// call, so a tape can be differentiated more than once.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::shape("backward", "root must be a 1x1 scalar"));
        }
        let mut adjoints: Vec<Option<DenseMatrix>> = (0..=root.0).map(|_| None).collect();
        adjoints[root.0] = Some(DenseMatrix::scalar(1.0)?);
        let mut grads = Gradients::new();

        for idx in (0..=root.0).rev() {
            let Some(upstream) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match grads.get_mut(id) {
                    Some(g) => g.add_assign(&upstream),
                    None => {
                        grads.insert(*id, upstream);
                    }
                },
                Op::MatMul(a, b) => {
                    let da = matrix::matmul_transposed(&upstream, self.value(*b))?;
                    let db = matrix::matmul(&self.value(*a).transpose(), &upstream)?;
                    accumulate(&mut adjoints, *a, da);
                    accumulate(&mut adjoints, *b, db);
                }
                Op::MatMulT(a, b) => {
                    // c = a bᵀ: da = dc · b, db = dcᵀ · a
                    let da = matrix::matmul(&upstream, self.value(*b))?;
                    let db = matrix::matmul(&upstream.transpose(), self.value(*a))?;
                    accumulate(&mut adjoints, *a, da);
                    accumulate(&mut adjoints, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut adjoints, *a, upstream.transpose()),
                Op::AddRowBias(a, bias) => {
                    let mut db = DenseMatrix::zeros(1, upstream.cols());
                    for r in 0..upstream.rows() {
                        for (acc, g) in db.data_mut().iter_mut().zip(upstream.row(r)) {
                            *acc += g;
                        }
                    }
                    accumulate(&mut adjoints, *a, upstream);
                    accumulate(&mut adjoints, *bias, db);
                }
                Op::NormalizeRows { input, norms } => {
                    let u = &node.value;
                    let mut dx = upstream;
                    for (r, &n) in norms.iter().enumerate() {
                        let proj = dot(u.row(r), dx.row(r));
                        for (g, &ur) in dx.row_mut(r).iter_mut().zip(u.row(r)) {
                            *g = (*g - ur * proj) / n;
                        }
                    }
                    accumulate(&mut adjoints, *input, dx);
                }
                Op::ScaleByExp(a, s) => {
                    let factor = self.value(*s).data()[0].exp();
                    let ds = dot(upstream.data(), node.value.data());
                    accumulate(&mut adjoints, *a, upstream.map(|g| g * factor));
                    accumulate(&mut adjoints, *s, DenseMatrix::scalar(ds)?);
                }
                Op::Scale(a, c) => accumulate(&mut adjoints, *a, upstream.map(|g| g * c)),
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, upstream.clone());
                    accumulate(&mut adjoints, *b, upstream);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut dx = upstream;
                    for r in 0..p.rows() {
                        let inner = dot(p.row(r), dx.row(r));
                        for (g, &pr) in dx.row_mut(r).iter_mut().zip(p.row(r)) {
                            *g = pr * (*g - inner);
                        }
                    }
                    accumulate(&mut adjoints, *a, dx);
                }
                Op::KlRowMean { p, target } => {
                    let seed = upstream.data()[0];
                    let probs = self.value(*p);
                    let n = probs.rows() as f64;
                    let mut dp = DenseMatrix::zeros(probs.rows(), probs.cols());
                    for r in 0..probs.rows() {
                        for c in 0..probs.cols() {
                            let (t, pv) = (target.get(r, c), probs.get(r, c));
                            if t > 0.0 && pv > LOG_FLOOR {
                                dp.set(r, c, -seed * t / (pv * n));
                            }
                        }
                    }
                    accumulate(&mut adjoints, *p, dp);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adjoints: &mut [Option<DenseMatrix>], v: Var, g: DenseMatrix) {
    match &mut adjoints[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Row-mean KL divergence `KL(target ‖ p)` with the log floor applied to `p`.
pub fn kl_row_mean(target: &DenseMatrix, p: &DenseMatrix) -> Result<f64> {
    if target.shape() != p.shape() {
        return Err(Error::shape(
            "kl_row_mean",
            format!("target {:?} vs prediction {:?}", target.shape(), p.shape()),
        ));
    }
    if p.rows() == 0 {
        return Err(Error::DegenerateBatch("empty distribution batch".into()));
    }
    let mut total = 0.0;
    for r in 0..p.rows() {
        let mut row = 0.0;
        for (&t, &pv) in target.row(r).iter().zip(p.row(r)) {
            if t > 0.0 {
                row += t * (t.ln() - pv.max(LOG_FLOOR).ln());
            }
        }
        total += row;
    }
    Ok(total / p.rows() as f64)
}
