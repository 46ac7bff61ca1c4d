use descent_core::autodiff::{Tape, Var};
use descent_core::models::LossContext;
use descent_core::trainer::toy::{ConvexToy, ToyData};
use descent_core::trainer::{
    constraint_slacks, dual_step, erm_train, lagrangian, resilient_slack_step, train, ConstraintSchedule, DualState,
    LayeredModel, OptimizerKind, ResilientMode, SlackTerm, TrainConfig, TrainingLog,
};
use descent_core::{Error, Result, Tensor};
use proptest::prelude::*;

fn scalars(tape: &mut Tape, values: &[f64]) -> Vec<Var> {
    values.iter().map(|&v| tape.param(Tensor::scalar(v))).collect()
}

// f_L + Σ λ_l (f_l − (1 − α_l) f_{l−1}), written out directly.
fn lagrangian_oracle(losses: &[f64], lambda: &[f64], alpha: &[f64]) -> f64 {
    let l = lambda.len();
    let mut total = losses[l];
    for i in 0..l {
        total += lambda[i] * (losses[i + 1] - (1.0 - alpha[i]) * losses[i]);
    }
    total
}

fn vectors(len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(0.0f64..10.0, len + 1),
        prop::collection::vec(0.0f64..5.0, len),
        prop::collection::vec(0.01f64..0.99, len),
    )
}

proptest! {
    #[test]
    fn slacks_match_definition((losses, u, alpha) in (1usize..6).prop_flat_map(vectors)) {
        let sched = ConstraintSchedule { alpha: alpha.clone(), f0: None };
        let g = constraint_slacks(&losses, &sched, &u).unwrap();
        for l in 0..alpha.len() {
            let want = losses[l + 1] - (1.0 - alpha[l]) * losses[l] - u[l];
            prop_assert!((g[l] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn lagrangian_matches_oracle((losses, lambda, alpha) in (1usize..6).prop_flat_map(vectors)) {
        let mut tape = Tape::new();
        let vars = scalars(&mut tape, &losses);
        let sched = ConstraintSchedule { alpha: alpha.clone(), f0: None };
        let got = lagrangian(&mut tape, &vars, &lambda, &sched, None).unwrap();
        let want = lagrangian_oracle(&losses, &lambda, &alpha);
        prop_assert!((tape.scalar(got) - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn lagrangian_with_zero_multipliers_is_last_loss((losses, _, alpha) in (1usize..6).prop_flat_map(vectors)) {
        let mut tape = Tape::new();
        let vars = scalars(&mut tape, &losses);
        let sched = ConstraintSchedule { alpha: alpha.clone(), f0: None };
        let zero = vec![0.0; alpha.len()];
        let got = lagrangian(&mut tape, &vars, &zero, &sched, None).unwrap();
        prop_assert!((tape.scalar(got) - losses[alpha.len()]).abs() <= 1e-12);
    }

    #[test]
    fn lagrangian_is_affine_in_multipliers(
        (losses, l1, alpha) in (1usize..6).prop_flat_map(vectors),
        seed in 0u64..1000,
        a in -2.0f64..3.0,
    ) {
        let l2: Vec<f64> = l1.iter().enumerate().map(|(i, v)| (v * 0.37 + (seed + i as u64) as f64 * 0.01) % 4.0).collect();
        // keep the combination nonnegative
        let mix: Vec<f64> = l1.iter().zip(&l2).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        prop_assume!(mix.iter().all(|v| *v >= 0.0));
        let sched = ConstraintSchedule { alpha: alpha.clone(), f0: None };
        let eval = |lam: &[f64]| {
            let mut tape = Tape::new();
            let vars = scalars(&mut tape, &losses);
            let v = lagrangian(&mut tape, &vars, lam, &sched, None).unwrap();
            tape.scalar(v)
        };
        let lhs = eval(&mix);
        let rhs = a * eval(&l1) + (1.0 - a) * eval(&l2);
        prop_assert!((lhs - rhs).abs() <= 1e-10);
    }

    #[test]
    fn explicit_slack_at_its_optimum_reduces((losses, lambda, alpha) in (1usize..6).prop_flat_map(vectors), beta in 0.1f64..100.0) {
        let l = lambda.len();
        let sched = ConstraintSchedule { alpha: alpha.clone(), f0: None };
        let mut tape = Tape::new();
        let vars = scalars(&mut tape, &losses);
        let plain = lagrangian(&mut tape, &vars, &lambda, &sched, None).unwrap();
        let u = tape.constant(Tensor::new(l, 1, lambda.iter().map(|v| v / beta).collect()).unwrap());
        let relaxed = lagrangian(&mut tape, &vars, &lambda, &sched, Some(SlackTerm { u, beta })).unwrap();
        let norm_sq: f64 = lambda.iter().map(|v| v * v).sum();
        let want = tape.scalar(plain) - norm_sq / (2.0 * beta);
        prop_assert!((tape.scalar(relaxed) - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn weight_decay_with_infinite_beta_is_plain(lambda in prop::collection::vec(0.0f64..5.0, 1..6), seed in 0u64..1000, eta2 in 0.0f64..1.0) {
        let g: Vec<f64> = lambda.iter().enumerate().map(|(i, _)| ((seed as f64 + i as f64) * 0.731).sin() * 3.0).collect();
        let mut plain = DualState::new(lambda.len(), 1.0, eta2, ResilientMode::Off);
        plain.lambda = lambda.clone();
        let mut wd = DualState::new(lambda.len(), f64::INFINITY, eta2, ResilientMode::WeightDecay);
        wd.lambda = lambda.clone();
        dual_step(&mut plain, &g).unwrap();
        dual_step(&mut wd, &g).unwrap();
        prop_assert_eq!(&plain.lambda, &wd.lambda);
        // and the plain step is the projected ascent formula
        for i in 0..lambda.len() {
            prop_assert_eq!(plain.lambda[i], (lambda[i] + eta2 * g[i]).max(0.0));
        }
        wd.literal_decay = true;
        wd.lambda = lambda.clone();
        dual_step(&mut wd, &g).unwrap();
        prop_assert_eq!(&plain.lambda, &wd.lambda);
    }

    #[test]
    fn slack_step_fixes_lambda_over_beta(lambda in prop::collection::vec(0.0f64..5.0, 1..6), beta in 0.5f64..20.0) {
        let star: Vec<f64> = lambda.iter().map(|v| v / beta).collect();
        let next = resilient_slack_step(&star, &lambda, beta, 0.01);
        for (a, b) in next.iter().zip(&star) {
            prop_assert!((a - b).abs() <= 1e-15 * b.max(1.0));
        }
        // iterating from zero converges to the same point
        let mut u = vec![0.0; lambda.len()];
        for _ in 0..4000 {
            u = resilient_slack_step(&u, &lambda, beta, 0.5 / beta);
        }
        for (a, b) in u.iter().zip(&star) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}

fn toy_data() -> Vec<ToyData> {
    (0..12).map(|s| ToyData::generate(16, 3, 0.5, s)).collect()
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 5,
        eta1: 0.05,
        optimizer: OptimizerKind::ADAM,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn constrained_with_frozen_multipliers_equals_erm() {
    let data = toy_data();
    let cfg = toy_config();
    let mut erm = ConvexToy::zeros(3);
    erm_train(&mut erm, &data, &cfg, &mut TrainingLog::new(3)).unwrap();

    let mut con = ConvexToy::zeros(3);
    let mut dual = DualState::new(3, 1.0, 0.0, ResilientMode::Off);
    let sched = ConstraintSchedule::constant(0.2, 3);
    let mut log = TrainingLog::new(3);
    train(&mut con, &data, &sched, &mut dual, &cfg, &mut log).unwrap();

    let bits = |m: &ConvexToy| m.coefficients().iter().map(|c| c.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&erm), bits(&con));
    assert_eq!(dual.lambda, vec![0.0; 3]);
    assert_eq!(log.records.len(), 4 * 3);
}

#[test]
fn warmup_keeps_multipliers_at_zero() {
    let data = toy_data();
    let cfg = TrainConfig {
        epochs: 2,
        primal_warmup_epochs: 2,
        ..toy_config()
    };
    let mut m = ConvexToy::zeros(3);
    let mut dual = DualState::new(3, 1.0, 1.0, ResilientMode::Off);
    let mut log = TrainingLog::new(3);
    train(&mut m, &data, &ConstraintSchedule::constant(0.9, 3), &mut dual, &cfg, &mut log).unwrap();
    assert!(log.records.iter().all(|r| r.lambda.as_ref().unwrap().iter().all(|v| *v == 0.0)));
}

#[test]
fn multipliers_stay_nonnegative() {
    let data = toy_data();
    let mut m = ConvexToy::zeros(3);
    let mut dual = DualState::new(3, 1.0, 0.5, ResilientMode::ExplicitSlack);
    let mut log = TrainingLog::new(3);
    train(&mut m, &data, &ConstraintSchedule::constant(0.6, 3), &mut dual, &toy_config(), &mut log).unwrap();
    for r in &log.records {
        assert!(r.lambda.as_ref().unwrap().iter().all(|v| *v >= 0.0));
        assert!(r.slack.as_ref().unwrap().iter().all(|v| *v >= 0.0));
    }
}

/// One parameter whose loss is exactly zero but whose gradient overflows.
struct Overflow {
    probe: Tensor,
}

impl LayeredModel for Overflow {
    type Sample = ();
    type Bound = Var;

    fn num_layers(&self) -> usize {
        1
    }

    fn named_blocks(&self) -> Vec<(String, &Tensor)> {
        vec![("probe".to_string(), &self.probe)]
    }

    fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.probe]
    }

    fn bind(&self, vars: &[Var]) -> Result<Var> {
        Ok(vars[0])
    }

    fn layer_losses(&self, tape: &mut Tape, probe: &Var, _: &(), _: &LossContext) -> Result<Vec<Var>> {
        let big = tape.constant(Tensor::scalar(1e308));
        let prod = tape.matmul(big, *probe)?;
        let loss = tape.scale(prod, 1e308)?;
        Ok(vec![tape.constant(Tensor::scalar(1.0)), loss])
    }
}

#[test]
fn non_finite_gradient_names_the_block() {
    let mut m = Overflow { probe: Tensor::scalar(0.0) };
    let mut log = TrainingLog::new(1);
    let err = erm_train(&mut m, &[()], &toy_config(), &mut log).unwrap_err();
    match err {
        Error::NonFiniteGradient { block } => assert_eq!(block, "probe"),
        other => panic!("unexpected error {other}"),
    }
    assert_eq!(m.probe.item(), 0.0);
}

#[test]
fn divergence_stops_training_with_partial_log() {
    let data = vec![ToyData {
        features: vec![Tensor::scalar(1e7)],
        y: Tensor::scalar(-1e7),
    }];
    let mut m = ConvexToy::zeros(1);
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 1,
        eta1: 10.0,
        optimizer: OptimizerKind::Sgd,
        ..TrainConfig::default()
    };
    let mut log = TrainingLog::new(1);
    let err = erm_train(&mut m, &data, &cfg, &mut log).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. } | Error::NonFinite { .. }), "{err}");
    assert!(!log.records.is_empty());
}
