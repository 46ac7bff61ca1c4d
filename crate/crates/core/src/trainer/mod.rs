//! Primal-dual training under layerwise descent constraints.
//!
//! Layer `l` is asked to satisfy `f̂_l ≤ (1 − α_l)·f̂_{l−1}` on average over a
//! batch. The trainer descends the Lagrangian
//! `L̂ = f̂_L + Σ_l λ_l·(f̂_l − (1 − α_l)·f̂_{l−1})` in the model parameters and
//! ascends it in the multipliers `λ ≥ 0`. Two relaxations are available: an
//! explicit slack vector `u ≥ 0` with penalty `(β/2)‖u‖²`, and its closed
//! form, a decay applied to `λ` at every dual step.

pub mod log;
pub mod optimizer;
pub mod toy;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{model_forward, BoundModel, Example, LossContext, ModelParams};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

pub use log::{LogRecord, TrainingLog};
pub use optimizer::{OptimizerKind, PrimalOptimizer};

/// Batch-mean losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Anything whose forward pass yields one loss per layer.
pub trait LayeredModel {
    type Sample;
    type Bound;

    fn num_layers(&self) -> usize;
    fn named_blocks(&self) -> Vec<(String, &Tensor)>;
    fn blocks_mut(&mut self) -> Vec<&mut Tensor>;
    /// Interprets tape vars (one per block, in block order) as the model.
    fn bind(&self, vars: &[Var]) -> Result<Self::Bound>;
    /// Losses `f_0 … f_L` of one sample.
    fn layer_losses(
        &self,
        tape: &mut Tape,
        bound: &Self::Bound,
        sample: &Self::Sample,
        ctx: &LossContext,
    ) -> Result<Vec<Var>>;
}

impl LayeredModel for ModelParams {
    type Sample = Example;
    type Bound = BoundModel;

    fn num_layers(&self) -> usize {
        self.spec.num_layers
    }

    fn named_blocks(&self) -> Vec<(String, &Tensor)> {
        ModelParams::named_blocks(self)
    }

    fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        ModelParams::blocks_mut(self)
    }

    fn bind(&self, vars: &[Var]) -> Result<BoundModel> {
        ModelParams::bind(self, vars)
    }

    fn layer_losses(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        sample: &Example,
        ctx: &LossContext,
    ) -> Result<Vec<Var>> {
        Ok(model_forward(tape, bound, sample, ctx)?.losses)
    }
}

/// Descent factors and the optional fixed reference for the first layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSchedule {
    pub alpha: Vec<f64>,
    /// When set, the first constraint reads `f̂_1 ≤ (1 − α_1)·f₀`.
    pub f0: Option<f64>,
}

impl ConstraintSchedule {
    pub fn constant(alpha: f64, layers: usize) -> Self {
        ConstraintSchedule {
            alpha: vec![alpha; layers],
            f0: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::param("alpha values must be finite"));
        }
        if let Some(f0) = self.f0 {
            if !(f0 > 0.0) {
                return Err(Error::param("f0 must be positive"));
            }
        }
        if self.alpha.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            ::log::warn!("descent factor outside (0, 1): {:?}", self.alpha);
        }
        Ok(())
    }

    pub fn loss_context(&self) -> LossContext {
        LossContext {
            reference_f0: self.f0,
        }
    }
}

/// `g_l = f̂_l − (1 − α_l)·f̂_{l−1} − u_l`, with `f̂_0` replaced by `f₀`
/// when configured. `g_l ≤ 0` means constraint `l` holds.
pub fn constraint_slacks(losses: &[f64], sched: &ConstraintSchedule, u: &[f64]) -> Result<Vec<f64>> {
    let l = sched.alpha.len();
    if losses.len() != l + 1 || u.len() != l {
        return Err(Error::contract(format!(
            "{} constraints need {} losses and {l} slacks, got {} and {}",
            l,
            l + 1,
            losses.len(),
            u.len()
        )));
    }
    Ok((1..=l)
        .map(|i| {
            let prev = match (i, sched.f0) {
                (1, Some(f0)) => f0,
                _ => losses[i - 1],
            };
            losses[i] - (1.0 - sched.alpha[i - 1]) * prev - u[i - 1]
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResilientMode {
    #[default]
    Off,
    ExplicitSlack,
    WeightDecay,
}

/// Slack penalty `(β/2)‖u‖² − uᵀλ` with `u` an `L × 1` tape var.
#[derive(Clone, Copy, Debug)]
pub struct SlackTerm {
    pub u: Var,
    pub beta: f64,
}

/// The empirical Lagrangian of one batch. Terms with `λ_l = 0` are left
/// out, so `λ = 0` returns `f̂_L` itself.
pub fn lagrangian(
    tape: &mut Tape,
    losses: &[Var],
    lambda: &[f64],
    sched: &ConstraintSchedule,
    slack: Option<SlackTerm>,
) -> Result<Var> {
    let l = lambda.len();
    if losses.len() != l + 1 || sched.alpha.len() != l {
        return Err(Error::contract("lagrangian: losses, multipliers and schedule disagree"));
    }
    if lambda.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::contract(format!("multipliers must be nonnegative: {lambda:?}")));
    }
    let mut coef = vec![0.0; l + 1];
    coef[l] = 1.0;
    for i in 1..=l {
        if lambda[i - 1] != 0.0 {
            coef[i] += lambda[i - 1];
            coef[i - 1] -= lambda[i - 1] * (1.0 - sched.alpha[i - 1]);
        }
    }
    let mut terms: Vec<(Var, f64)> = Vec::new();
    for (i, &c) in coef.iter().enumerate() {
        if c != 0.0 {
            let v = match (i, sched.f0) {
                (0, Some(f0)) => tape.constant(Tensor::scalar(f0)),
                _ => losses[i],
            };
            terms.push((v, c));
        }
    }
    let mut total = if terms.len() == 1 && terms[0].1 == 1.0 {
        terms[0].0
    } else {
        tape.weighted_sum(&terms)?
    };
    if let Some(SlackTerm { u, beta }) = slack {
        if tape.value(u).shape() != [l, 1] {
            return Err(Error::Shape {
                op: "lagrangian(u)",
                left: tape.value(u).shape(),
                right: [l, 1],
            });
        }
        let lam = tape.constant(Tensor::new(1, l, lambda.to_vec())?);
        let sq = tape.frobenius_sq(u)?;
        let dot = tape.matmul(lam, u)?;
        total = tape.weighted_sum(&[(total, 1.0), (sq, 0.5 * beta), (dot, -1.0)])?;
    }
    Ok(total)
}

/// Multipliers, slacks and the hyperparameters of their updates.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub slack: Vec<f64>,
    pub beta: f64,
    pub eta2: f64,
    /// Step size of the slack update; defaults to `eta2`.
    pub slack_step: f64,
    pub mode: ResilientMode,
    /// Use the decay factor `1 − 1/β` instead of `1 − η₂/β`.
    pub literal_decay: bool,
}

impl DualState {
    pub fn new(layers: usize, beta: f64, eta2: f64, mode: ResilientMode) -> Self {
        DualState {
            lambda: vec![0.0; layers],
            slack: vec![0.0; layers],
            beta,
            eta2,
            slack_step: eta2,
            mode,
            literal_decay: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.eta2 >= 0.0) || !(self.slack_step >= 0.0) {
            return Err(Error::param("dual needs beta > 0 and nonnegative step sizes"));
        }
        if self.lambda.len() != self.slack.len() {
            return Err(Error::contract("multiplier and slack lengths differ"));
        }
        Ok(())
    }

    fn check_nonnegative(&self) -> Result<()> {
        if self.lambda.iter().chain(&self.slack).any(|v| !(*v >= 0.0)) {
            return Err(Error::contract(format!(
                "dual variables left the nonnegative orthant: lambda {:?}, u {:?}",
                self.lambda, self.slack
            )));
        }
        Ok(())
    }
}

/// Projected ascent on `λ` given the current constraint values `g`.
pub fn dual_step(dual: &mut DualState, g: &[f64]) -> Result<()> {
    if g.len() != dual.lambda.len() {
        return Err(Error::contract("dual step: wrong number of constraint values"));
    }
    let decay = match (dual.mode, dual.literal_decay) {
        (ResilientMode::WeightDecay, false) => 1.0 - dual.eta2 / dual.beta,
        (ResilientMode::WeightDecay, true) => 1.0 - 1.0 / dual.beta,
        _ => 1.0,
    };
    for (lam, gi) in dual.lambda.iter_mut().zip(g) {
        *lam = (decay * *lam + dual.eta2 * gi).max(0.0);
    }
    dual.check_nonnegative()
}

/// Projected gradient step on `(β/2)‖u‖² − uᵀλ`; its fixed point is `λ/β`.
pub fn resilient_slack_step(u: &[f64], lambda: &[f64], beta: f64, eta: f64) -> Vec<f64> {
    u.iter()
        .zip(lambda)
        .map(|(ui, li)| (ui - eta * (beta * ui - li)).max(0.0))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta1: f64,
    pub optimizer: OptimizerKind,
    /// Initial epochs trained with constraints inactive and `λ` held at 0.
    pub primal_warmup_epochs: usize,
    /// Reset the slack vector to zero after each epoch.
    pub restart_slack_each_epoch: bool,
    pub shuffle: bool,
    pub seed: u64,
    /// Fill the `wall_ms` log column; off keeps logs byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            eta1: 3e-4,
            optimizer: OptimizerKind::default(),
            primal_warmup_epochs: 0,
            restart_slack_each_epoch: false,
            shuffle: true,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.eta1 > 0.0) {
            return Err(Error::param("eta1 must be positive"));
        }
        Ok(())
    }
}

/// Mean over samples of each layer's loss, as tape vars.
fn batch_losses<M: LayeredModel>(
    model: &M,
    tape: &mut Tape,
    bound: &M::Bound,
    batch: &[&M::Sample],
    ctx: &LossContext,
) -> Result<Vec<Var>> {
    let per_sample = batch
        .iter()
        .map(|s| model.layer_losses(tape, bound, s, ctx))
        .collect::<Result<Vec<_>>>()?;
    let w = 1.0 / batch.len() as f64;
    (0..=model.num_layers())
        .map(|l| {
            let terms: Vec<(Var, f64)> = per_sample.iter().map(|s| (s[l], w)).collect();
            tape.weighted_sum(&terms)
        })
        .collect()
}

fn run<M: LayeredModel>(
    model: &mut M,
    data: &[M::Sample],
    mut constrained: Option<(&ConstraintSchedule, &mut DualState)>,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<()> {
    cfg.validate()?;
    let layers = model.num_layers();
    if let Some((sched, dual)) = &constrained {
        sched.validate()?;
        dual.validate()?;
        if sched.alpha.len() != layers || dual.lambda.len() != layers {
            return Err(Error::contract(format!(
                "model has {layers} layers but the schedule or dual state does not"
            )));
        }
    }
    if cfg.epochs > 0 && data.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    let ctx = match &constrained {
        Some((sched, _)) => sched.loss_context(),
        None => LossContext::default(),
    };
    let names: Vec<String> = model.named_blocks().into_iter().map(|(n, _)| n).collect();
    let mut opt = PrimalOptimizer::new(cfg.optimizer, cfg.eta1)?;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng::stream(cfg.seed, Domain::Shuffle, epoch as u64));
        }
        let active = epoch >= cfg.primal_warmup_epochs;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&M::Sample> = idx.iter().map(|&i| &data[i]).collect();
            let mut tape = Tape::new();
            let vars: Vec<Var> = model
                .named_blocks()
                .into_iter()
                .map(|(_, t)| tape.param(t.clone()))
                .collect();
            let bound = model.bind(&vars)?;
            let losses = batch_losses(model, &mut tape, &bound, &samples, &ctx)?;
            let values: Vec<f64> = losses.iter().map(|&v| tape.scalar(v)).collect();

            let (objective, g) = match &constrained {
                Some((sched, dual)) => {
                    let explicit = dual.mode == ResilientMode::ExplicitSlack;
                    let zeros = vec![0.0; layers];
                    let u = if explicit { &dual.slack } else { &zeros };
                    let g = constraint_slacks(&values, sched, u)?;
                    let lambda = if active { dual.lambda.clone() } else { zeros.clone() };
                    let slack = explicit.then(|| SlackTerm {
                        u: tape.constant(Tensor::new(layers, 1, dual.slack.clone()).expect("L ≥ 1")),
                        beta: dual.beta,
                    });
                    (lagrangian(&mut tape, &losses, &lambda, sched, slack)?, Some(g))
                }
                None => (losses[layers], None),
            };

            let worst = values.iter().copied().fold(0.0f64, |a, b| if b.is_nan() { b } else { a.max(b) });
            if !(worst <= DIVERGENCE_LIMIT) {
                log.records.push(LogRecord {
                    epoch,
                    batch,
                    losses: values,
                    lambda: constrained.as_ref().map(|(_, d)| d.lambda.clone()),
                    slack: constrained.as_ref().map(|(_, d)| d.slack.clone()),
                    g,
                    wall_ms: 0,
                });
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    loss: worst,
                });
            }

            let grads = tape.backward(objective)?;
            let grad_refs: Vec<&Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
            opt.step(&names, model.blocks_mut(), &grad_refs)?;

            if let (Some((_, dual)), Some(g)) = (constrained.as_mut(), g.as_ref()) {
                if active {
                    let lambda_before = dual.lambda.clone();
                    dual_step(dual, g)?;
                    if dual.mode == ResilientMode::ExplicitSlack {
                        dual.slack = resilient_slack_step(&dual.slack, &lambda_before, dual.beta, dual.slack_step);
                        dual.check_nonnegative()?;
                    }
                }
            }
            log.records.push(LogRecord {
                epoch,
                batch,
                losses: values,
                lambda: constrained.as_ref().map(|(_, d)| d.lambda.clone()),
                slack: constrained.as_ref().map(|(_, d)| d.slack.clone()),
                g,
                wall_ms: if cfg.record_wall_time {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                },
            });
        }
        if cfg.restart_slack_each_epoch {
            if let Some((_, dual)) = constrained.as_mut() {
                dual.slack.iter_mut().for_each(|u| *u = 0.0);
            }
        }
        ::log::debug!("epoch {epoch} done, {} log records", log.records.len());
    }
    Ok(())
}

/// Constrained training. Records are appended to `log` as they are
/// produced, so a failed run leaves its partial log behind.
pub fn train<M: LayeredModel>(
    model: &mut M,
    data: &[M::Sample],
    sched: &ConstraintSchedule,
    dual: &mut DualState,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<()> {
    run(model, data, Some((sched, dual)), cfg, log)
}

/// Unconstrained baseline minimizing `f̂_L` only.
pub fn erm_train<M: LayeredModel>(
    model: &mut M,
    data: &[M::Sample],
    cfg: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<()> {
    run(model, data, None, cfg, log)
}
