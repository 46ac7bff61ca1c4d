//! The three trained architectures and their per-layer traces.
//!
//! A model is a stack of `L` layers producing outputs `Φ_1 … Φ_L` from the
//! input `Φ_0 = X`. Training and evaluation need every intermediate output,
//! so [`model_forward`] returns a [`LayerTrace`] with the output and loss of
//! each layer instead of only the final prediction.
//!
//! Parameters are stored as named blocks in a fixed order. That order is the
//! order used by the optimizer, by [`bind`](ModelParams::bind) and by the
//! checkpoint format.

pub mod checkpoint;
pub mod layers;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dct::overcomplete_dictionary;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;
use rand::Rng;

pub use layers::{
    attend, attention_forward, denoising_loss, dust_layer_forward, dust_preactivation,
    dust_reconstruct, energy_g1, ut_preactivation,
    layer_forward, readout_forward, ut_layer_forward, AttentionOrientation, AttentionVars,
    DustHyper, Nonlinearity, ReadoutVars,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Generic,
    Ut,
    Dust,
}

/// Architecture description: everything needed to build or check a model
/// apart from the weights themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Token dimension `N` (signal dimension `m` for DUST).
    pub n: usize,
    /// Attention width `D` (generic, UT) or number of dictionary atoms (DUST).
    pub d: usize,
    pub num_layers: usize,
    pub nonlinearity: Nonlinearity,
    pub orientation: AttentionOrientation,
    /// Convex-combination weight of the UT attention step.
    pub eta: f64,
    pub dust: DustHyper,
    /// One dictionary for all DUST layers instead of one per layer.
    pub shared_dictionary: bool,
    /// Number of classes when a readout is attached.
    pub classes: Option<usize>,
    /// Start each UT `M` at `I` plus the uniform draw, so `W_s` begins near
    /// the identity rather than near zero.
    pub residual_init: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::param("a model needs at least one layer"));
        }
        if self.n == 0 || self.d == 0 {
            return Err(Error::param("model dimensions must be positive"));
        }
        if let Some(c) = self.classes {
            if c < 2 {
                return Err(Error::param("a readout needs at least two classes"));
            }
        }
        match self.kind {
            ModelKind::Dust => {
                if self.d <= self.n {
                    return Err(Error::param(format!(
                        "DUST dictionary must be overcomplete: {} atoms for signal dimension {}",
                        self.d, self.n
                    )));
                }
                if !(self.dust.c > 0.0) {
                    return Err(Error::param("DUST c must be positive"));
                }
                if self.classes.is_some() {
                    return Err(Error::param("DUST is a denoising model and takes no readout"));
                }
            }
            ModelKind::Ut => {
                if !(0.0..=1.0).contains(&self.eta) {
                    return Err(Error::param("UT eta must lie in [0, 1]"));
                }
            }
            ModelKind::Generic => {}
        }
        if let Nonlinearity::SoftThreshold(g) = self.nonlinearity {
            if !(g >= 0.0) {
                return Err(Error::param("soft-threshold level must be nonnegative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerParams {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub w: Tensor,
    pub u: Tensor,
}

/// Tied-weight layer: `W₁` serves as query, key and value projection;
/// the perceptron weight is `W_s = (M + Mᵀ)/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct UtLayerParams {
    pub w1: Tensor,
    pub m: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerStack {
    Generic(Vec<AttentionLayerParams>),
    Ut(Vec<UtLayerParams>),
    /// One dictionary per layer, or a single shared one.
    Dust(Vec<Tensor>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub layers: LayerStack,
    pub readout: Option<Readout>,
}

fn uniform_init(rows: usize, cols: usize, fan_in: usize, seed: u64, block: u64) -> Tensor {
    let s = 1.0 / (fan_in as f64).sqrt();
    let mut rng = rng::stream(seed, Domain::Init, block);
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-s..=s))
}

impl ModelParams {
    /// Fresh parameters: uniform `[−1/√fan_in, 1/√fan_in]` weights, DCT
    /// dictionaries and a zero readout bias.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (n, d, l) = (spec.n, spec.d, spec.num_layers);
        let mut block = 0u64;
        let mut next = |rows, cols, fan_in| {
            block += 1;
            uniform_init(rows, cols, fan_in, seed, block)
        };
        let layers = match spec.kind {
            ModelKind::Generic => LayerStack::Generic(
                (0..l)
                    .map(|_| AttentionLayerParams {
                        q: next(d, n, n),
                        k: next(d, n, n),
                        v: next(d, n, n),
                        w: next(n, d, d),
                        u: next(n, n, n),
                    })
                    .collect(),
            ),
            ModelKind::Ut => LayerStack::Ut(
                (0..l)
                    .map(|_| {
                        let w1 = next(d, n, n);
                        let mut m = next(n, n, n);
                        if spec.residual_init {
                            for i in 0..n {
                                m.set(i, i, m.get(i, i) + 1.0);
                            }
                        }
                        UtLayerParams { w1, m }
                    })
                    .collect(),
            ),
            ModelKind::Dust => {
                let dict = overcomplete_dictionary(n, d)?;
                let count = if spec.shared_dictionary { 1 } else { l };
                LayerStack::Dust(vec![dict; count])
            }
        };
        let readout = spec.classes.map(|c| Readout {
            w: next(c, n, n),
            b: Tensor::zeros(c, 1),
        });
        Ok(ModelParams {
            spec,
            layers,
            readout,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.spec.num_layers
    }

    /// Parameter blocks with their names, in canonical order.
    pub fn named_blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.layers {
            LayerStack::Generic(ls) => {
                for (i, p) in ls.iter().enumerate() {
                    out.push((format!("layer{i}.q"), &p.q));
                    out.push((format!("layer{i}.k"), &p.k));
                    out.push((format!("layer{i}.v"), &p.v));
                    out.push((format!("layer{i}.w"), &p.w));
                    out.push((format!("layer{i}.u"), &p.u));
                }
            }
            LayerStack::Ut(ls) => {
                for (i, p) in ls.iter().enumerate() {
                    out.push((format!("layer{i}.w1"), &p.w1));
                    out.push((format!("layer{i}.m"), &p.m));
                }
            }
            LayerStack::Dust(ds) => {
                for (i, d) in ds.iter().enumerate() {
                    out.push((format!("dict{i}"), d));
                }
            }
        }
        if let Some(r) = &self.readout {
            out.push(("readout.w".to_string(), &r.w));
            out.push(("readout.b".to_string(), &r.b));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        match &mut self.layers {
            LayerStack::Generic(ls) => {
                for p in ls {
                    out.extend([&mut p.q, &mut p.k, &mut p.v, &mut p.w, &mut p.u]);
                }
            }
            LayerStack::Ut(ls) => {
                for p in ls {
                    out.extend([&mut p.w1, &mut p.m]);
                }
            }
            LayerStack::Dust(ds) => out.extend(ds.iter_mut()),
        }
        if let Some(r) = &mut self.readout {
            out.extend([&mut r.w, &mut r.b]);
        }
        out
    }

    /// Records every block as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> BoundModel {
        let vars: Vec<Var> = self
            .named_blocks()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        self.bind(&vars).expect("vars registered from these blocks")
    }

    /// Interprets `vars` (one per block, canonical order) as this model.
    pub fn bind(&self, vars: &[Var]) -> Result<BoundModel> {
        let expected = self.named_blocks().len();
        if vars.len() != expected {
            return Err(Error::contract(format!(
                "expected {expected} parameter vars, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut take = || it.next().expect("length checked");
        let layers = match &self.layers {
            LayerStack::Generic(ls) => BoundLayers::Generic(
                ls.iter()
                    .map(|_| AttentionVars {
                        q: take(),
                        k: take(),
                        v: take(),
                        w: take(),
                        u: take(),
                    })
                    .collect(),
            ),
            LayerStack::Ut(ls) => BoundLayers::Ut(ls.iter().map(|_| (take(), take())).collect()),
            LayerStack::Dust(ds) => BoundLayers::Dust(ds.iter().map(|_| take()).collect()),
        };
        let readout = self.readout.as_ref().map(|_| ReadoutVars {
            w: take(),
            b: take(),
        });
        Ok(BoundModel {
            spec: self.spec.clone(),
            layers,
            readout,
        })
    }
}

#[derive(Clone, Debug)]
pub enum BoundLayers {
    Generic(Vec<AttentionVars>),
    /// `(W₁, M)` per layer.
    Ut(Vec<(Var, Var)>),
    Dust(Vec<Var>),
}

/// A model whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub spec: ModelSpec,
    pub layers: BoundLayers,
    pub readout: Option<ReadoutVars>,
}

/// What a sample asks the model to produce.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Clean signal for denoising.
    Clean(Tensor),
    /// Class index for classification.
    Label(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub target: Target,
}

/// How slot 0 of a trace is filled.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossContext {
    /// Constant reference `f₀` for slot 0; `None` measures the loss of the
    /// raw input representation.
    pub reference_f0: Option<f64>,
}

/// Outputs `Φ_0 … Φ_L` and losses `f(Φ_0) … f(Φ_L)` of one forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub outputs: Vec<Var>,
    pub losses: Vec<Var>,
}

impl LayerTrace {
    pub fn loss_values(&self, tape: &Tape) -> Vec<f64> {
        self.losses.iter().map(|&v| tape.scalar(v)).collect()
    }

    pub fn output_values(&self, tape: &Tape) -> Vec<Tensor> {
        self.outputs.iter().map(|&v| tape.value(v).clone()).collect()
    }
}

/// Loss of one layer output against the sample's target.
pub fn sample_loss(
    tape: &mut Tape,
    model: &BoundModel,
    output: Var,
    target: &Target,
    clean: Option<Var>,
) -> Result<Var> {
    match (target, &model.readout) {
        (Target::Clean(_), None) => {
            let clean = clean.ok_or_else(|| Error::contract("missing clean target var"))?;
            denoising_loss(tape, clean, output)
        }
        (Target::Label(label), Some(r)) => {
            let probs = readout_forward(tape, output, r)?;
            tape.cross_entropy(probs, *label)
        }
        (Target::Clean(_), Some(_)) => Err(Error::contract(
            "denoising target given to a model with a readout",
        )),
        (Target::Label(_), None) => Err(Error::contract(
            "classification target given to a model without a readout",
        )),
    }
}

/// Runs all `L` layers on `example.input`, recording every output and loss.
pub fn model_forward(
    tape: &mut Tape,
    model: &BoundModel,
    example: &Example,
    ctx: &LossContext,
) -> Result<LayerTrace> {
    let x = tape.constant(example.input.clone());
    let clean = match &example.target {
        Target::Clean(c) => {
            if c.shape() != example.input.shape() {
                return Err(Error::Shape {
                    op: "model_forward(clean)",
                    left: c.shape(),
                    right: example.input.shape(),
                });
            }
            Some(tape.constant(c.clone()))
        }
        Target::Label(_) => None,
    };

    let spec = &model.spec;
    let mut outputs = vec![x];
    match &model.layers {
        BoundLayers::Generic(ls) => {
            let mut cur = x;
            for p in ls {
                cur = layer_forward(tape, cur, p, spec.nonlinearity, spec.orientation)?;
                outputs.push(cur);
            }
        }
        BoundLayers::Ut(ls) => {
            let mut cur = x;
            for &(w1, m) in ls {
                cur = ut_layer_forward(tape, cur, w1, m, spec.eta, spec.orientation)?;
                outputs.push(cur);
            }
        }
        BoundLayers::Dust(dicts) => {
            let mut code = None;
            for l in 0..spec.num_layers {
                let dict = dicts[if dicts.len() == 1 { 0 } else { l }];
                let h = dust_layer_forward(tape, code, x, dict, &spec.dust, spec.orientation)?;
                outputs.push(dust_reconstruct(tape, h, dict)?);
                code = Some(h);
            }
        }
    }

    let mut losses = Vec::with_capacity(outputs.len());
    for (l, &out) in outputs.iter().enumerate() {
        let loss = match (l, ctx.reference_f0) {
            (0, Some(f0)) => tape.constant(Tensor::scalar(f0)),
            _ => sample_loss(tape, model, out, &example.target, clean)?,
        };
        losses.push(loss);
    }
    Ok(LayerTrace { outputs, losses })
}

/// Predicted class of the readout applied to a layer output.
pub fn predict_label(tape: &mut Tape, model: &BoundModel, output: Var) -> Result<usize> {
    let r = model
        .readout
        .as_ref()
        .ok_or_else(|| Error::contract("model has no readout"))?;
    let probs = readout_forward(tape, output, r)?;
    let p = tape.value(probs).data();
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            n: 4,
            d: if kind == ModelKind::Dust { 8 } else { 3 },
            num_layers: 2,
            nonlinearity: Nonlinearity::Relu,
            orientation: AttentionOrientation::Columns,
            eta: 1.0,
            dust: DustHyper::default(),
            shared_dictionary: false,
            residual_init: false,
            classes: None,
        }
    }

    #[test]
    fn block_counts() {
        let g = ModelParams::init(spec(ModelKind::Generic), 1).unwrap();
        assert_eq!(g.named_blocks().len(), 10);
        let u = ModelParams::init(spec(ModelKind::Ut), 1).unwrap();
        assert_eq!(u.named_blocks().len(), 4);
        let d = ModelParams::init(spec(ModelKind::Dust), 1).unwrap();
        assert_eq!(d.named_blocks().len(), 2);
        let shared = ModelParams::init(
            ModelSpec {
                shared_dictionary: true,
                ..spec(ModelKind::Dust)
            },
            1,
        )
        .unwrap();
        assert_eq!(shared.named_blocks().len(), 1);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelParams::init(spec(ModelKind::Generic), 9).unwrap();
        let b = ModelParams::init(spec(ModelKind::Generic), 9).unwrap();
        let c = ModelParams::init(spec(ModelKind::Generic), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.named_blocks() {
            let fan_in = if name.ends_with(".w") { 3.0 } else { 4.0 };
            let s = 1.0 / f64::sqrt(fan_in);
            assert!(t.data().iter().all(|v| v.abs() <= s), "{name}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(ModelKind::Dust);
        s.d = 4;
        assert!(ModelParams::init(s, 0).is_err());
        let mut s = spec(ModelKind::Ut);
        s.num_layers = 0;
        assert!(ModelParams::init(s, 0).is_err());
        let mut s = spec(ModelKind::Generic);
        s.classes = Some(1);
        assert!(ModelParams::init(s, 0).is_err());
    }
}
