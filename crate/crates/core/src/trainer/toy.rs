//! Linear layered model with quadratic losses, small enough to solve by
//! brute force.
//!
//! Layer `l` adds `θ_l·x_l` to a running prediction `z_{l−1}` (with
//! `z_0 = 0`) and its loss is the mean squared residual `‖y − z_l‖²/n`.
//! Each layer sees its own feature, so early layers cannot reach the final
//! optimum alone and the descent constraints bind.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::LossContext;
use crate::rng::{self, normal, Domain};
use crate::tensor::Tensor;

use super::LayeredModel;

/// Full data set: one feature column per layer and the target column.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyData {
    pub features: Vec<Tensor>,
    pub y: Tensor,
}

impl ToyData {
    /// `n` draws of correlated unit-variance features with correlation
    /// `rho` between consecutive ones, and `y = Σ x_l`.
    pub fn generate(n: usize, layers: usize, rho: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, Domain::Test, 0);
        let mut features = vec![Tensor::zeros(n, 1); layers];
        for i in 0..n {
            let mut prev = normal(&mut r);
            features[0].set(i, 0, prev);
            for f in features.iter_mut().skip(1) {
                prev = rho * prev + (1.0 - rho * rho).sqrt() * normal(&mut r);
                f.set(i, 0, prev);
            }
        }
        let y = Tensor::from_fn(n, 1, |i, _| features.iter().map(|f| f.get(i, 0)).sum());
        ToyData { features, y }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvexToy {
    pub theta: Vec<Tensor>,
}

impl ConvexToy {
    pub fn zeros(layers: usize) -> Self {
        ConvexToy {
            theta: vec![Tensor::zeros(1, 1); layers],
        }
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.theta.iter().map(Tensor::item).collect()
    }
}

impl LayeredModel for ConvexToy {
    type Sample = ToyData;
    type Bound = Vec<Var>;

    fn num_layers(&self) -> usize {
        self.theta.len()
    }

    fn named_blocks(&self) -> Vec<(String, &Tensor)> {
        self.theta
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("theta{i}"), t))
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        self.theta.iter_mut().collect()
    }

    fn bind(&self, vars: &[Var]) -> Result<Vec<Var>> {
        if vars.len() != self.theta.len() {
            return Err(Error::contract("wrong number of toy parameters"));
        }
        Ok(vars.to_vec())
    }

    fn layer_losses(
        &self,
        tape: &mut Tape,
        bound: &Vec<Var>,
        data: &ToyData,
        ctx: &LossContext,
    ) -> Result<Vec<Var>> {
        if data.features.len() != bound.len() {
            return Err(Error::contract("toy data has the wrong number of features"));
        }
        let n = data.y.rows() as f64;
        let y = tape.constant(data.y.clone());
        let mut losses = vec![match ctx.reference_f0 {
            Some(f0) => tape.constant(Tensor::scalar(f0)),
            None => {
                let sq = tape.frobenius_sq(y)?;
                tape.scale(sq, 1.0 / n)?
            }
        }];
        let mut residual = y;
        for (x, &theta) in data.features.iter().zip(bound) {
            let x = tape.constant(x.clone());
            let step = tape.matmul(x, theta)?;
            residual = tape.sub(residual, step)?;
            let sq = tape.frobenius_sq(residual)?;
            losses.push(tape.scale(sq, 1.0 / n)?);
        }
        Ok(losses)
    }
}
