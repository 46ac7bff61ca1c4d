//! Primal parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `θ ← θ − η·∇`.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::ADAM
    }
}

/// Optimizer state for a fixed list of parameter blocks.
#[derive(Clone, Debug)]
pub struct PrimalOptimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl PrimalOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::param("primal step size must be positive"));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = kind {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::param("adam needs beta1, beta2 in [0, 1) and eps > 0"));
            }
        }
        Ok(PrimalOptimizer {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// Applies one update. `names[i]` labels `params[i]` in diagnostics.
    pub fn step(&mut self, names: &[String], params: Vec<&mut Tensor>, grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() || names.len() != grads.len() {
            return Err(Error::contract("parameter and gradient lists differ in length"));
        }
        for (name, g) in names.iter().zip(grads) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { block: name.clone() });
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (pi, gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *pi -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
                    self.v = self.m.clone();
                }
                self.step += 1;
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (j, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gi;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gi * gi;
                        *pi -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
