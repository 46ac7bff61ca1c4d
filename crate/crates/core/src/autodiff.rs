//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are recorded in execution order, so node indices are already a
//! topological order and the backward pass is a single reverse sweep. Values
//! are snapshotted into the tape when recorded; later mutation of the source
//! tensors does not affect a tape that is being differentiated.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower clamp applied to probabilities before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    WeightedSum(Vec<(Var, f64)>),
    Relu(Var),
    SoftThreshold(Var, f64),
    SoftmaxRows(Var),
    FrobeniusSq(Var),
    Sum(Var),
    MeanCols(Var),
    CrossEntropy(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Relu(..) => "relu",
            Op::SoftThreshold(..) => "soft_threshold",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::FrobeniusSq(..) => "frobenius_sq",
            Op::Sum(..) => "sum",
            Op::MeanCols(..) => "mean_cols",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }
}

/// Names of every differentiable primitive the tape records.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "sub",
    "scale",
    "weighted_sum",
    "relu",
    "soft_threshold",
    "softmax_rows",
    "frobenius_sq",
    "sum",
    "mean_cols",
    "cross_entropy",
];

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default, Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::WeightedSum(terms) => terms.iter().any(|(v, _)| self.requires_grad(*v)),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::SoftThreshold(a, _)
            | Op::SoftmaxRows(a)
            | Op::FrobeniusSq(a)
            | Op::Sum(a)
            | Op::MeanCols(a)
            | Op::CrossEntropy(a, _) => self.requires_grad(*a),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(value, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    /// `Σ c_i · x_i` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::contract("weighted_sum of zero terms"))?;
        let shape = self.value(first).shape();
        let mut acc = Tensor::zeros(shape[0], shape[1]);
        for &(v, c) in terms {
            let x = self.value(v);
            if x.shape() != shape {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    left: shape,
                    right: x.shape(),
                });
            }
            for (o, &xi) in acc.data_mut().iter_mut().zip(x.data()) {
                *o += c * xi;
            }
        }
        self.push(acc, Op::WeightedSum(terms.to_vec()))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// `sign(u) · max(0, |u| − γ)` elementwise.
    pub fn soft_threshold(&mut self, a: Var, gamma: f64) -> Result<Var> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::param(format!(
                "soft-threshold level must be a finite nonnegative number, got {gamma}"
            )));
        }
        let value = self.value(a).map(|x| soft_threshold_scalar(x, gamma));
        self.push(value, Op::SoftThreshold(a, gamma))
    }

    /// Row-wise softmax with the row maximum subtracted before exponentiation.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).frobenius_sq());
        self.push(value, Op::FrobeniusSq(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Averages the columns of an `r × c` node into an `r × 1` column.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols() as f64;
        let value = Tensor::from_fn(x.rows(), 1, |i, _| {
            (0..x.cols()).map(|j| x.get(i, j)).sum::<f64>() / c
        });
        self.push(value, Op::MeanCols(a))
    }

    /// `−ln(max(p[label], 1e-12))` for a probability vector of any orientation.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        let p = self.value(probs);
        if p.len() < 2 {
            return Err(Error::param("cross-entropy needs at least two classes"));
        }
        if label >= p.len() {
            return Err(Error::param(format!(
                "label {label} out of range for {} classes",
                p.len()
            )));
        }
        let value = Tensor::scalar(-p.data()[label].max(LOG_CLAMP).ln());
        self.push(value, Op::CrossEntropy(probs, label))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    ///
    /// Every `requires_grad` leaf receives a gradient; leaves the loss does
    /// not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss is not recorded on this tape"));
        }
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }

        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let g = grads.get_mut(idx).and_then(Option::take);
            let g = match (&node.op, node.requires_grad, g) {
                (_, _, Some(g)) => Some(g),
                (Op::Leaf, true, None) => {
                    let [r, c] = node.value.shape();
                    Some(Tensor::zeros(r, c))
                }
                _ => None,
            };
            out.push(g);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(
        &self,
        node: &Node,
        upstream: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let g = upstream.matmul(&self.value(*b).transpose())?;
                    accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    let g = self.value(*a).transpose().matmul(upstream)?;
                    accumulate(grads, *b, g);
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, upstream.transpose()),
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, upstream.clone());
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, upstream.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, upstream.clone());
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, upstream.scale(-1.0));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, upstream.scale(*c)),
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if self.requires_grad(v) {
                        accumulate(grads, v, upstream.scale(c));
                    }
                }
            }
            Op::Relu(a) => {
                let g = self
                    .value(*a)
                    .zip_with(upstream, "relu", |x, g| if x > 0.0 { g } else { 0.0 })?;
                accumulate(grads, *a, g);
            }
            Op::SoftThreshold(a, gamma) => {
                let g = self.value(*a).zip_with(upstream, "soft_threshold", |x, g| {
                    if x.abs() > *gamma {
                        g
                    } else {
                        0.0
                    }
                })?;
                accumulate(grads, *a, g);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| upstream.get(i, j) * y.get(i, j)).sum();
                    for j in 0..c {
                        g.set(i, j, y.get(i, j) * (upstream.get(i, j) - dot));
                    }
                }
                accumulate(grads, *a, g);
            }
            Op::FrobeniusSq(a) => {
                let s = 2.0 * upstream.item();
                accumulate(grads, *a, self.value(*a).scale(s));
            }
            Op::Sum(a) => {
                let [r, c] = self.value(*a).shape();
                accumulate(grads, *a, Tensor::filled(r, c, upstream.item()));
            }
            Op::MeanCols(a) => {
                let [r, c] = self.value(*a).shape();
                let inv = 1.0 / c as f64;
                accumulate(grads, *a, Tensor::from_fn(r, c, |i, _| upstream.get(i, 0) * inv));
            }
            Op::CrossEntropy(a, label) => {
                let p = self.value(*a);
                let [r, c] = p.shape();
                let mut g = Tensor::zeros(r, c);
                let pl = p.data()[*label];
                if pl > LOG_CLAMP {
                    g.data_mut()[*label] = -upstream.item() / pl;
                }
                accumulate(grads, *a, g);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if `v` participates in differentiation.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a `requires_grad` leaf. Panics for non-differentiable nodes.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("variable does not require grad")
    }
}

pub fn soft_threshold_scalar(x: f64, gamma: f64) -> f64 {
    x.signum() * (x.abs() - gamma).max(0.0)
}

/// Stable row-wise softmax of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let max = (0..c).map(|j| x.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..c {
            let e = (x.get(i, j) - max).exp();
            out.set(i, j, e);
            total += e;
        }
        for j in 0..c {
            out.set(i, j, out.get(i, j) / total);
        }
    }
    out
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[k] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Default step for [`finite_diff_grad`].
pub const FD_STEP: f64 = 1e-5;

/// Relative error between two gradients, `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`.
///
/// Falls back to the absolute difference norm when both gradients vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.frobenius_sq().sqrt().max(numeric.frobenius_sq().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
