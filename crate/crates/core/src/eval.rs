//! Metrics, per-layer losses, layerwise loss ratios and perturbation sweeps.
//!
//! Every routine that averages over samples first computes per-sample
//! values independently (in parallel) and then reduces them with a fixed
//! pairwise tree, so results do not depend on thread scheduling.

use std::io::{Read, Write};

use crate::autodiff::Tape;
use crate::data::EvalSet;
use crate::error::{Error, Result};
use crate::models::{model_forward, predict_label, Example, LossContext, ModelParams, Target};
use crate::tensor::Tensor;

/// Denominators at or below this are left out of the ratio population.
pub const RATIO_FLOOR: f64 = 1e-12;
pub const HISTOGRAM_BINS: usize = 50;
pub const HISTOGRAM_MAX: f64 = 2.0;

/// Sum by recursive halving.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

pub fn pairwise_mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// `f` applied to every item on up to `available_parallelism` threads,
/// results in input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

/// `sqrt((1/M) Σ ‖pred_i − truth_i‖²_F)`.
pub fn rmse(pred: &[Tensor], truth: &[Tensor]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::contract(format!(
            "rmse needs aligned nonempty lists, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let sq = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| Ok(p.sub(t)?.frobenius_sq()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_mean(&sq).sqrt())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::contract(format!(
            "accuracy needs aligned nonempty lists, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Final prediction of one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Output(Tensor),
    Label(usize),
}

/// Per-layer losses and final prediction of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    pub losses: Vec<f64>,
    pub prediction: Prediction,
}

pub fn evaluate_sample(model: &ModelParams, example: &Example, ctx: &LossContext) -> Result<SampleEval> {
    let mut tape = Tape::new();
    let bound = model.register(&mut tape);
    let trace = model_forward(&mut tape, &bound, example, ctx)?;
    let last = *trace.outputs.last().expect("trace has L+1 outputs");
    let prediction = match example.target {
        Target::Clean(_) => Prediction::Output(tape.value(last).clone()),
        Target::Label(_) => Prediction::Label(predict_label(&mut tape, &bound, last)?),
    };
    Ok(SampleEval {
        losses: trace.loss_values(&tape),
        prediction,
    })
}

pub fn evaluate_samples(model: &ModelParams, examples: &[Example], ctx: &LossContext) -> Result<Vec<SampleEval>> {
    par_map(examples, |ex| evaluate_sample(model, ex, ctx))
        .into_iter()
        .collect()
}

fn mean_layer_losses(evals: &[SampleEval]) -> Vec<f64> {
    let layers = evals[0].losses.len();
    (0..layers)
        .map(|l| {
            let col: Vec<f64> = evals.iter().map(|e| e.losses[l]).collect();
            pairwise_mean(&col)
        })
        .collect()
}

/// Mean loss of each layer `0..=L` over the set.
pub fn layerwise_eval(model: &ModelParams, examples: &[Example], ctx: &LossContext) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::contract("layerwise_eval needs a nonempty set"));
    }
    Ok(mean_layer_losses(&evaluate_samples(model, examples, ctx)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Rmse,
    Accuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Accuracy => "accuracy",
        }
    }
}

/// Task metric of the final layer, computed from sample evaluations.
pub fn task_metric(examples: &[Example], evals: &[SampleEval]) -> Result<(Metric, f64)> {
    let mut outs = Vec::new();
    let mut clean = Vec::new();
    let mut pred = Vec::new();
    let mut labels = Vec::new();
    for (ex, ev) in examples.iter().zip(evals) {
        match (&ex.target, &ev.prediction) {
            (Target::Clean(c), Prediction::Output(o)) => {
                clean.push(c.clone());
                outs.push(o.clone());
            }
            (Target::Label(l), Prediction::Label(p)) => {
                labels.push(*l);
                pred.push(*p);
            }
            _ => return Err(Error::contract("mixed targets in one evaluation set")),
        }
    }
    if !outs.is_empty() && !pred.is_empty() {
        return Err(Error::contract("mixed targets in one evaluation set"));
    }
    if pred.is_empty() {
        Ok((Metric::Rmse, rmse(&outs, &clean)?))
    } else {
        Ok((Metric::Accuracy, accuracy(&pred, &labels)?))
    }
}

/// Distribution of per-sample layerwise loss ratios `f_l / f_{l−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioStats {
    pub count: usize,
    pub excluded: usize,
    pub mean: f64,
    pub median: f64,
    /// Fraction of ratios strictly below 1.
    pub fraction_descending: f64,
    /// Fraction of ratios at or below `1 − α`.
    pub fraction_meeting_alpha: f64,
    pub alpha: f64,
    /// `HISTOGRAM_BINS` equal bins over `[0, 2)` followed by one overflow bin.
    pub histogram: Vec<usize>,
}

impl RatioStats {
    pub fn from_ratios(mut ratios: Vec<f64>, excluded: usize, alpha: f64) -> Self {
        let count = ratios.len();
        let mut histogram = vec![0usize; HISTOGRAM_BINS + 1];
        let width = HISTOGRAM_MAX / HISTOGRAM_BINS as f64;
        for &r in &ratios {
            let bin = if r >= HISTOGRAM_MAX {
                HISTOGRAM_BINS
            } else {
                ((r / width) as usize).min(HISTOGRAM_BINS - 1)
            };
            histogram[bin] += 1;
        }
        let frac = |pred: &dyn Fn(f64) -> bool| {
            if count == 0 {
                0.0
            } else {
                ratios.iter().filter(|&&r| pred(r)).count() as f64 / count as f64
            }
        };
        let fraction_descending = frac(&|r| r < 1.0);
        let fraction_meeting_alpha = frac(&|r| r <= 1.0 - alpha);
        let mean = if count == 0 { f64::NAN } else { pairwise_mean(&ratios) };
        ratios.sort_by(f64::total_cmp);
        let median = match count {
            0 => f64::NAN,
            n if n % 2 == 1 => ratios[n / 2],
            n => 0.5 * (ratios[n / 2 - 1] + ratios[n / 2]),
        };
        RatioStats {
            count,
            excluded,
            mean,
            median,
            fraction_descending,
            fraction_meeting_alpha,
            alpha,
            histogram,
        }
    }

    /// Lower edge, upper edge and count of each bin; the overflow bin has
    /// an infinite upper edge.
    pub fn histogram_rows(&self) -> Vec<(f64, f64, usize)> {
        let width = HISTOGRAM_MAX / HISTOGRAM_BINS as f64;
        self.histogram
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if i == HISTOGRAM_BINS {
                    (HISTOGRAM_MAX, f64::INFINITY, c)
                } else {
                    (i as f64 * width, (i + 1) as f64 * width, c)
                }
            })
            .collect()
    }

    pub fn write_histogram_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_low", "bin_high", "count"])?;
        for (lo, hi, c) in self.histogram_rows() {
            w.write_record([lo.to_string(), hi.to_string(), c.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Ratios of consecutive per-sample losses; slot 0 is the measured loss of
/// the input itself.
pub fn ratio_stats_from_losses(per_sample: &[Vec<f64>], alpha: f64) -> RatioStats {
    let mut ratios = Vec::new();
    let mut excluded = 0;
    for losses in per_sample {
        for w in losses.windows(2) {
            if w[0] > RATIO_FLOOR {
                ratios.push(w[1] / w[0]);
            } else {
                excluded += 1;
            }
        }
    }
    RatioStats::from_ratios(ratios, excluded, alpha)
}

pub fn ratio_stats(model: &ModelParams, examples: &[Example], alpha: f64) -> Result<RatioStats> {
    let evals = evaluate_samples(model, examples, &LossContext::default())?;
    let losses: Vec<Vec<f64>> = evals.into_iter().map(|e| e.losses).collect();
    Ok(ratio_stats_from_losses(&losses, alpha))
}

/// Trapezoid integral of `values` over `gammas`: `(normalized, raw)`,
/// where `normalized = raw / (γ_max − γ_min)`. A single point gives
/// `(value, 0)`.
pub fn auc(gammas: &[f64], values: &[f64]) -> Result<(f64, f64)> {
    if gammas.len() != values.len() || gammas.is_empty() {
        return Err(Error::contract("auc needs aligned nonempty lists"));
    }
    if gammas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::contract("auc needs strictly increasing gammas"));
    }
    if gammas.len() == 1 {
        return Ok((values[0], 0.0));
    }
    let raw: f64 = gammas
        .windows(2)
        .zip(values.windows(2))
        .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
        .sum();
    Ok((raw / (gammas[gammas.len() - 1] - gammas[0]), raw))
}

/// One model's results over a perturbation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub tag: String,
    pub seed: u64,
    pub gammas: Vec<f64>,
    pub metric: Vec<f64>,
    /// `layer_losses[i][l]`: mean loss of layer `l` at `gammas[i]`.
    pub layer_losses: Vec<Vec<f64>>,
    pub auc: f64,
    pub auc_raw: f64,
}

/// A model to sweep together with its label.
pub struct SweepEntry<'a> {
    pub tag: String,
    pub seed: u64,
    pub model: &'a ModelParams,
}

/// Evaluates each model on every set. Sets must be sorted by γ.
pub fn sweep(entries: &[SweepEntry<'_>], sets: &[EvalSet]) -> Result<(Metric, Vec<SweepResult>)> {
    if sets.is_empty() {
        return Err(Error::contract("sweep needs at least one evaluation set"));
    }
    let gammas: Vec<f64> = sets.iter().map(|s| s.gamma).collect();
    let mut metric_kind = None;
    let mut results = Vec::with_capacity(entries.len());
    for e in entries {
        let mut metric = Vec::new();
        let mut layer_losses = Vec::new();
        for set in sets {
            let evals = evaluate_samples(e.model, &set.examples, &LossContext::default())?;
            let (kind, value) = task_metric(&set.examples, &evals)?;
            metric_kind = Some(kind);
            metric.push(value);
            layer_losses.push(mean_layer_losses(&evals));
        }
        let (auc_norm, auc_raw) = auc(&gammas, &metric)?;
        results.push(SweepResult {
            tag: e.tag.clone(),
            seed: e.seed,
            gammas: gammas.clone(),
            metric,
            layer_losses,
            auc: auc_norm,
            auc_raw,
        });
    }
    Ok((metric_kind.expect("nonempty sets"), results))
}

pub const METRICS_HEADER: [&str; 7] = [
    "gamma",
    "metric",
    "auc_flag",
    "layer_index",
    "mean_loss",
    "model_tag",
    "seed",
];

/// Metrics CSV. Per-γ rows come first (γ ascending, then layer, then
/// model in input order) with `auc_flag = 0`; each model then gets a row
/// with the normalized AUC (`auc_flag = 1`) and one with the raw trapezoid
/// value (`auc_flag = 2`), leaving γ, layer and loss empty.
pub fn write_metrics_csv<W: Write>(results: &[SweepResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    if let Some(first) = results.first() {
        if results.iter().any(|r| r.gammas != first.gammas) {
            return Err(Error::contract("sweep results use different grids"));
        }
        let layers = first.layer_losses.first().map_or(0, Vec::len);
        for (i, g) in first.gammas.iter().enumerate() {
            for l in 0..layers {
                for r in results {
                    w.write_record([
                        g.to_string(),
                        r.metric[i].to_string(),
                        "0".into(),
                        l.to_string(),
                        r.layer_losses[i][l].to_string(),
                        r.tag.clone(),
                        r.seed.to_string(),
                    ])?;
                }
            }
        }
    }
    for r in results {
        for (flag, v) in [(1, r.auc), (2, r.auc_raw)] {
            w.write_record([
                String::new(),
                v.to_string(),
                flag.to_string(),
                String::new(),
                String::new(),
                r.tag.clone(),
                r.seed.to_string(),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Format(format!("metrics csv: bad {what} `{field}`")))
}

/// Rebuilds sweep results from a metrics CSV, in order of first appearance.
pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<SweepResult>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out: Vec<SweepResult> = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let tag = rec[5].to_string();
        let seed: u64 = parse(&rec[6], "seed")?;
        let idx = match out.iter().position(|r| r.tag == tag && r.seed == seed) {
            Some(i) => i,
            None => {
                out.push(SweepResult {
                    tag,
                    seed,
                    gammas: Vec::new(),
                    metric: Vec::new(),
                    layer_losses: Vec::new(),
                    auc: f64::NAN,
                    auc_raw: f64::NAN,
                });
                out.len() - 1
            }
        };
        let r = &mut out[idx];
        let value: f64 = parse(&rec[1], "metric")?;
        match &rec[2] {
            "0" => {
                let gamma: f64 = parse(&rec[0], "gamma")?;
                let layer: usize = parse(&rec[3], "layer_index")?;
                let loss: f64 = parse(&rec[4], "mean_loss")?;
                if r.gammas.last() != Some(&gamma) {
                    r.gammas.push(gamma);
                    r.metric.push(value);
                    r.layer_losses.push(Vec::new());
                }
                let row = r.layer_losses.last_mut().expect("pushed above");
                if row.len() != layer {
                    return Err(Error::Format("metrics csv: layers out of order".into()));
                }
                row.push(loss);
            }
            "1" => r.auc = value,
            "2" => r.auc_raw = value,
            f => return Err(Error::Format(format!("metrics csv: bad auc_flag `{f}`"))),
        }
    }
    Ok(out)
}

/// Long-format per-layer losses: one row per model, γ and layer.
pub fn write_layer_losses_csv<W: Write>(results: &[SweepResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model_tag", "seed", "gamma", "layer_index", "mean_loss"])?;
    for r in results {
        for (g, losses) in r.gammas.iter().zip(&r.layer_losses) {
            for (l, v) in losses.iter().enumerate() {
                w.write_record([
                    r.tag.clone(),
                    r.seed.to_string(),
                    g.to_string(),
                    l.to_string(),
                    v.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        let a = Tensor::row_vector(&[1.0, 2.0]);
        assert_eq!(rmse(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 0.0);
        let b = Tensor::row_vector(&[4.0, 6.0]);
        assert_eq!(rmse(&[b], std::slice::from_ref(&a)).unwrap(), 5.0);
        assert!(rmse(&[a], &[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert!(accuracy(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert!((auc(&[0.1, 0.5, 1.5], &[0.7; 3]).unwrap().0 - 0.7).abs() < 1e-15);
        assert_eq!(auc(&[0.2], &[0.9]).unwrap(), (0.9, 0.0));
        let (n, r) = auc(&[0.0, 1.0, 3.0], &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(r, 1.5);
        assert_eq!(n, 0.5);
    }

    #[test]
    fn ratio_edge_cases() {
        let halving = vec![vec![4.0, 2.0, 1.0, 0.5]; 3];
        let s = ratio_stats_from_losses(&halving, 0.2);
        assert_eq!((s.count, s.mean, s.median, s.fraction_descending), (9, 0.5, 0.5, 1.0));
        let flat = vec![vec![1.0, 1.0, 1.0]];
        let s = ratio_stats_from_losses(&flat, 0.2);
        assert_eq!((s.mean, s.fraction_descending), (1.0, 0.0));
        let zero = vec![vec![0.0, 1.0, 3.0]];
        let s = ratio_stats_from_losses(&zero, 0.2);
        assert_eq!((s.count, s.excluded), (1, 1));
        assert_eq!(s.histogram[HISTOGRAM_BINS], 1);
    }
}
