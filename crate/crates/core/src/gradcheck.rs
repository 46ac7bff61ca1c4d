//! Finite-difference verification of every differentiable operation.
//!
//! Each registered check draws a random instance, differentiates a scalar
//! function of its inputs on the tape and compares against central
//! differences. Instances whose nonsmooth points lie within
//! [`KINK_MARGIN`] of an input are redrawn, since finite differences are
//! meaningless across a kink.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_grad, relative_error, Tape, Var, FD_STEP};
use crate::error::Result;
use crate::models::{
    attention_forward, dust_preactivation, readout_forward, ut_preactivation, AttentionOrientation,
    AttentionVars, DustHyper, ReadoutVars,
};
use crate::rng::{self, normal, Domain};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-3;
pub const DEFAULT_INSTANCES: usize = 100;

/// Scalar function of some tape inputs.
pub type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Tape gradients of `build` with respect to each input.
pub fn analytic_grads(inputs: &[Tensor], build: &Build) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.wrt(v).clone()).collect())
}

pub fn evaluate(inputs: &[Tensor], build: &Build) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.scalar(loss))
}

/// Central-difference gradients with respect to each input.
pub fn numeric_grads(inputs: &[Tensor], build: &Build) -> Result<Vec<Tensor>> {
    evaluate(inputs, build)?;
    Ok((0..inputs.len())
        .map(|i| {
            let mut probe = inputs.to_vec();
            finite_diff_grad(
                |x| {
                    probe[i] = x.clone();
                    evaluate(&probe, build).unwrap_or(f64::NAN)
                },
                &inputs[i],
                FD_STEP,
            )
        })
        .collect())
}

/// Largest per-input relative error.
pub fn compare(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let e = relative_error(a, n);
            if e.is_nan() { f64::INFINITY } else { e }
        })
        .fold(0.0, f64::max)
}

pub fn check_instance(inputs: &[Tensor], build: &Build) -> Result<f64> {
    Ok(compare(&analytic_grads(inputs, build)?, &numeric_grads(inputs, build)?))
}

/// One random instance: returns its relative error.
pub type InstanceFn = dyn Fn(&mut ChaCha8Rng) -> Result<f64> + Sync;

pub struct GradCheck {
    pub name: &'static str,
    pub instance: Box<InstanceFn>,
}

impl GradCheck {
    pub fn new(name: &'static str, f: impl Fn(&mut ChaCha8Rng) -> Result<f64> + Sync + 'static) -> Self {
        GradCheck {
            name,
            instance: Box::new(f),
        }
    }
}

fn gaussian(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| scale * normal(r))
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.random_range(1..=4), r.random_range(1..=4))
}

/// `‖out − c‖²_F`, turning a matrix output into a generic scalar.
fn project(tape: &mut Tape, out: Var, c: &Tensor) -> Result<Var> {
    let c = tape.constant(c.clone());
    let diff = tape.sub(out, c)?;
    tape.frobenius_sq(diff)
}

/// Checks `op` applied to random inputs of the given shapes.
fn unary_like(
    r: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Result<f64> {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&mut tape, &vars)?;
        tape.value(out).shape()
    };
    let target = gaussian(r, out_shape[0], out_shape[1], 1.0);
    let build = move |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let out = op(tape, v)?;
        project(tape, out, &target)
    };
    check_instance(&inputs, &build)
}

/// Moves entries within the margin of a kink at `±k` away from it.
fn clear_of(x: Tensor, kink: f64) -> Tensor {
    x.map(|v| {
        let d = v.abs() - kink;
        if d.abs() < KINK_MARGIN {
            v + (2.0 * KINK_MARGIN) * v.signum() * if d >= 0.0 { 1.0 } else { -1.0 }
        } else {
            v
        }
    })
}

fn near_kink(pre: &Tensor, kink: f64) -> bool {
    pre.data().iter().any(|v| (v.abs() - kink).abs() < KINK_MARGIN)
}

fn op_checks() -> Vec<GradCheck> {
    vec![
        GradCheck::new("matmul", |r| {
            let (n, k) = dims(r);
            let m = r.random_range(1..=4);
            let a = gaussian(r, n, k, 1.0);
            let b = gaussian(r, k, m, 1.0);
            unary_like(r, vec![a, b], |t, v| t.matmul(v[0], v[1]))
        }),
        GradCheck::new("transpose", |r| {
            let (n, m) = dims(r);
            let a = gaussian(r, n, m, 1.0);
            unary_like(r, vec![a], |t, v| t.transpose(v[0]))
        }),
        GradCheck::new("add", |r| {
            let (n, m) = dims(r);
            let a = gaussian(r, n, m, 1.0);
            let b = gaussian(r, n, m, 1.0);
            unary_like(r, vec![a, b], |t, v| t.add(v[0], v[1]))
        }),
        GradCheck::new("sub", |r| {
            let (n, m) = dims(r);
            let a = gaussian(r, n, m, 1.0);
            let b = gaussian(r, n, m, 1.0);
            unary_like(r, vec![a, b], |t, v| t.sub(v[0], v[1]))
        }),
        GradCheck::new("scale", |r| {
            let (n, m) = dims(r);
            let a = gaussian(r, n, m, 1.0);
            let c = 2.0 * normal(r);
            unary_like(r, vec![a], move |t, v| t.scale(v[0], c))
        }),
        GradCheck::new("weighted_sum", |r| {
            let (n, m) = dims(r);
            let count = r.random_range(1..=4);
            let inputs: Vec<Tensor> = (0..count).map(|_| gaussian(r, n, m, 1.0)).collect();
            let w: Vec<f64> = (0..count).map(|_| normal(r)).collect();
            unary_like(r, inputs, move |t, v| {
                let terms: Vec<(Var, f64)> = v.iter().copied().zip(w.iter().copied()).collect();
                t.weighted_sum(&terms)
            })
        }),
        GradCheck::new("relu", |r| {
            let (n, m) = dims(r);
            let a = clear_of(gaussian(r, n, m, 1.0), 0.0);
            unary_like(r, vec![a], |t, v| t.relu(v[0]))
        }),
        GradCheck::new("soft_threshold", |r| {
            let (n, m) = dims(r);
            let gamma = r.random_range(0.05..1.0);
            let a = clear_of(clear_of(gaussian(r, n, m, 1.5), gamma), 0.0);
            unary_like(r, vec![a], move |t, v| t.soft_threshold(v[0], gamma))
        }),
        GradCheck::new("softmax_rows", |r| {
            let (n, m) = dims(r);
            let a = gaussian(r, n, m, 2.0);
            unary_like(r, vec![a], |t, v| t.softmax_rows(v[0]))
        }),
        GradCheck::new("frobenius_sq", |r| {
            let (n, m) = dims(r);
            let a = gaussian(r, n, m, 1.0);
            check_instance(&[a], &|t: &mut Tape, v: &[Var]| t.frobenius_sq(v[0]))
        }),
        GradCheck::new("sum", |r| {
            let (n, m) = dims(r);
            let a = gaussian(r, n, m, 1.0);
            unary_like(r, vec![a], |t, v| t.sum(v[0]))
        }),
        GradCheck::new("mean_cols", |r| {
            let (n, m) = dims(r);
            let a = gaussian(r, n, m, 1.0);
            unary_like(r, vec![a], |t, v| t.mean_cols(v[0]))
        }),
        GradCheck::new("cross_entropy", |r| {
            let c = r.random_range(2..=5);
            let label = r.random_range(0..c);
            let logits = gaussian(r, 1, c, 1.5);
            check_instance(&[logits], &move |t: &mut Tape, v: &[Var]| {
                let p = t.softmax_rows(v[0])?;
                t.cross_entropy(p, label)
            })
        }),
    ]
}

fn orientation(r: &mut ChaCha8Rng) -> AttentionOrientation {
    if r.random_bool(0.5) {
        AttentionOrientation::Columns
    } else {
        AttentionOrientation::Rows
    }
}

fn layer_checks() -> Vec<GradCheck> {
    vec![
        GradCheck::new("attention_layer", |r| {
            let (n, t) = (r.random_range(2..=4), r.random_range(1..=4));
            let d = r.random_range(1..=4);
            let s = 1.0 / (n as f64).sqrt();
            let o = orientation(r);
            let inputs = vec![
                gaussian(r, n, t, 1.0),
                gaussian(r, d, n, s),
                gaussian(r, d, n, s),
                gaussian(r, d, n, s),
            ];
            unary_like(r, inputs, move |tape, v| {
                let p = AttentionVars {
                    q: v[1],
                    k: v[2],
                    v: v[3],
                    w: v[3],
                    u: v[3],
                };
                attention_forward(tape, v[0], &p, o)
            })
        }),
        GradCheck::new("ut_layer", |r| loop {
            let (n, t) = (r.random_range(2..=4), r.random_range(1..=4));
            let d = r.random_range(1..=4);
            let s = 1.0 / (n as f64).sqrt();
            let eta = if r.random_bool(0.5) { 1.0 } else { r.random_range(0.1..1.0) };
            let o = orientation(r);
            let inputs = vec![gaussian(r, n, t, 1.0), gaussian(r, d, n, s), gaussian(r, n, n, s)];
            let pre = move |tape: &mut Tape, v: &[Var]| ut_preactivation(tape, v[0], v[1], v[2], eta, o);
            let pre_value = {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
                let p = pre(&mut tape, &vars)?;
                tape.value(p).clone()
            };
            if near_kink(&pre_value, 0.0) {
                continue;
            }
            return unary_like(r, inputs, move |tape, v| {
                let p = pre(tape, v)?;
                tape.relu(p)
            });
        }),
        GradCheck::new("dust_layer", |r| loop {
            let (m, t) = (r.random_range(2..=4), r.random_range(1..=3));
            let k = m + r.random_range(1..=4);
            let hyper = DustHyper {
                lambda1: r.random_range(0.05..1.0),
                lambda2: r.random_range(0.0..1.0),
                c: r.random_range(1.0..3.0),
            };
            let first = r.random_bool(0.2);
            let o = orientation(r);
            let mut inputs = vec![
                gaussian(r, m, t, 1.0),
                gaussian(r, m, k, 1.0 / (m as f64).sqrt()),
            ];
            if !first {
                inputs.push(gaussian(r, k, t, 1.0));
            }
            let pre = move |tape: &mut Tape, v: &[Var]| {
                dust_preactivation(tape, v.get(2).copied(), v[0], v[1], &hyper, o)
            };
            let pre_value = {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
                let p = pre(&mut tape, &vars)?;
                tape.value(p).clone()
            };
            let kink = hyper.lambda1 / hyper.c;
            if near_kink(&pre_value, kink) {
                continue;
            }
            return unary_like(r, inputs, move |tape, v| {
                let p = pre(tape, v)?;
                tape.soft_threshold(p, kink)
            });
        }),
        GradCheck::new("readout", |r| {
            let (n, t) = (r.random_range(1..=4), r.random_range(1..=4));
            let c = r.random_range(2..=4);
            let label = r.random_range(0..c);
            let inputs = vec![gaussian(r, n, t, 1.0), gaussian(r, c, n, 1.0), gaussian(r, c, 1, 0.5)];
            check_instance(&inputs, &move |tape: &mut Tape, v: &[Var]| {
                let p = readout_forward(tape, v[0], &ReadoutVars { w: v[1], b: v[2] })?;
                tape.cross_entropy(p, label)
            })
        }),
    ]
}

/// Every primitive followed by the composed layers.
pub fn registry() -> Vec<GradCheck> {
    let mut all = op_checks();
    all.extend(layer_checks());
    all
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
    /// First error raised by an instance, if any.
    pub error: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.worst <= TOLERANCE
    }
}

/// Runs `instances` random instances of every check. Check `i` draws from
/// its own stream, so results do not depend on registry order.
pub fn run_suite(checks: &[GradCheck], instances: usize, seed: u64) -> Vec<CheckResult> {
    crate::eval::par_map(checks, |c| {
        let mut worst = 0.0f64;
        let mut error = None;
        let mut r = rng::stream2(seed, Domain::Test, fnv(c.name), 0);
        for _ in 0..instances {
            match (c.instance)(&mut r) {
                Ok(e) => worst = worst.max(if e.is_nan() { f64::INFINITY } else { e }),
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        CheckResult {
            name: c.name,
            instances,
            worst,
            error,
        }
    })
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}
