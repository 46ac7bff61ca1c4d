//! Experiment configuration files.
//!
//! A config is a sectioned TOML file. Unknown keys are rejected; optional
//! keys fall back to the defaults documented on each field.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SignalOptions, Structure, TaskSpec, GAMMA_GRID};
use crate::error::{Error, Result};
use crate::models::{AttentionOrientation, DustHyper, ModelKind, ModelSpec, Nonlinearity};
use crate::trainer::{ConstraintSchedule, DualState, OptimizerKind, ResilientMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Denoising,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Token (signal) dimension.
    pub n: usize,
    /// Sequence length.
    pub t: usize,
    /// Noise level of the training inputs, in units of the clean std.
    pub gamma_train: f64,
    #[serde(default = "default_grid")]
    pub gamma_grid: Vec<f64>,
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_held_out")]
    pub held_out_samples: usize,
    /// Classification only.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Classification only: distance between class means.
    #[serde(default)]
    pub separation: Option<f64>,
    /// Denoising only.
    #[serde(default = "default_structure")]
    pub structure: Structure,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub temporal_correlation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearityKind {
    Relu,
    SoftThreshold,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryMode {
    /// Per-layer dictionaries for constrained runs, a shared one otherwise.
    #[default]
    Auto,
    Shared,
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub layers: usize,
    /// Attention width; number of dictionary atoms for DUST. Defaults to
    /// `n` (`2n` for DUST).
    #[serde(default)]
    pub d: Option<usize>,
    /// Generic model only; UT always uses ReLU and DUST soft-thresholding.
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: NonlinearityKind,
    #[serde(default)]
    pub threshold: f64,
    #[serde(default)]
    pub orientation: AttentionOrientation,
    /// UT attention step weight.
    #[serde(default = "one")]
    pub eta: f64,
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    #[serde(default = "one")]
    pub c: f64,
    #[serde(default)]
    pub dictionary: DictionaryMode,
    /// Initialize UT perceptron weights near the identity.
    #[serde(default)]
    pub residual_init: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    /// Descent factor shared by all layers.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Per-layer factors; overrides `alpha` when present.
    #[serde(default)]
    pub alpha_schedule: Option<Vec<f64>>,
    #[serde(default)]
    pub f0: Option<f64>,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "default_eta2")]
    pub eta2: f64,
    /// Slack step size; defaults to `eta2`.
    #[serde(default)]
    pub slack_step: Option<f64>,
    #[serde(default)]
    pub resilient: ResilientMode,
    #[serde(default)]
    pub literal_decay: bool,
}

impl Default for ConstraintSection {
    fn default() -> Self {
        ConstraintSection {
            alpha: default_alpha(),
            alpha_schedule: None,
            f0: None,
            beta: 1.0,
            eta2: default_eta2(),
            slack_step: None,
            resilient: ResilientMode::Off,
            literal_decay: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Constrained,
    Unconstrained,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Constrained => "constrained",
            Variant::Unconstrained => "unconstrained",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_eta1")]
    pub eta1: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerName,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub primal_warmup_epochs: usize,
    #[serde(default)]
    pub restart_slack_each_epoch: bool,
    #[serde(default = "yes")]
    pub shuffle: bool,
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSection,
    pub model: ModelSection,
    #[serde(default)]
    pub constraints: ConstraintSection,
    pub training: TrainingSection,
    pub run: RunSection,
}

fn default_grid() -> Vec<f64> {
    GAMMA_GRID.to_vec()
}
fn default_train_samples() -> usize {
    2048
}
fn default_held_out() -> usize {
    512
}
fn default_structure() -> Structure {
    Structure::Smooth
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_nonlinearity() -> NonlinearityKind {
    NonlinearityKind::Relu
}
fn default_lambda1() -> f64 {
    DustHyper::default().lambda1
}
fn default_lambda2() -> f64 {
    DustHyper::default().lambda2
}
fn default_alpha() -> f64 {
    0.2
}
fn default_eta1() -> f64 {
    3e-4
}
fn default_eta2() -> f64 {
    3e-2
}
fn default_optimizer() -> OptimizerName {
    OptimizerName::Adam
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_variants() -> Vec<Variant> {
    vec![Variant::Constrained, Variant::Unconstrained]
}
fn default_output() -> String {
    "runs".to_string()
}

/// Pulls the offending key out of a TOML error message.
fn field_of(message: &str) -> String {
    for marker in ["missing field `", "unknown field `", "unknown variant `"] {
        if let Some(start) = message.find(marker) {
            let rest = &message[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    "<document>".to_string()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            Error::Config {
                field: field_of(&message),
                message: e.to_string().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical TOML text; parsing it yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        let m = &self.model;
        let bad = |field: &str, msg: &str| Err(Error::config(field, msg));
        if t.n == 0 || t.t == 0 {
            return bad("task.n", "dimensions must be positive");
        }
        if !(t.gamma_train >= 0.0) {
            return bad("task.gamma_train", "must be nonnegative");
        }
        if t.gamma_grid.is_empty() || t.gamma_grid.iter().any(|g| !(*g >= 0.0)) {
            return bad("task.gamma_grid", "must be a nonempty list of nonnegative values");
        }
        if t.train_samples == 0 || t.held_out_samples == 0 {
            return bad("task.train_samples", "sample counts must be positive");
        }
        match t.kind {
            TaskKind::Classification => {
                match t.classes {
                    Some(c) if c >= 2 && c <= t.n => {}
                    Some(_) => return bad("task.classes", "must lie in [2, n]"),
                    None => return bad("task.classes", "required for classification"),
                }
                match t.separation {
                    Some(s) if s > 0.0 => {}
                    Some(_) => return bad("task.separation", "must be positive"),
                    None => return bad("task.separation", "required for classification"),
                }
                if m.kind == ModelKind::Dust {
                    return bad("model.kind", "dust is a denoising model");
                }
            }
            TaskKind::Denoising => {
                if t.classes.is_some() || t.separation.is_some() {
                    return bad("task.classes", "only valid for classification");
                }
            }
        }
        if !(0.0..=1.0).contains(&t.temporal_correlation) {
            return bad("task.temporal_correlation", "must lie in [0, 1]");
        }
        if !(t.amplitude > 0.0) {
            return bad("task.amplitude", "must be positive");
        }
        if m.layers == 0 {
            return bad("model.layers", "must be at least 1");
        }
        if m.kind == ModelKind::Dust && self.d() <= t.n {
            return bad("model.d", "DUST needs more atoms than the signal dimension");
        }
        if m.d == Some(0) {
            return bad("model.d", "must be positive");
        }
        if !(m.c > 0.0) {
            return bad("model.c", "must be positive");
        }
        if !(0.0..=1.0).contains(&m.eta) {
            return bad("model.eta", "must lie in [0, 1]");
        }
        if !(m.threshold >= 0.0) {
            return bad("model.threshold", "must be nonnegative");
        }
        let c = &self.constraints;
        if let Some(s) = &c.alpha_schedule {
            if s.len() != m.layers {
                return bad("constraints.alpha_schedule", "needs one value per layer");
            }
        }
        if self.schedule().alpha.iter().any(|a| !a.is_finite()) {
            return bad("constraints.alpha", "must be finite");
        }
        if let Some(f0) = c.f0 {
            if !(f0 > 0.0) {
                return bad("constraints.f0", "must be positive");
            }
        }
        if !(c.beta > 0.0) {
            return bad("constraints.beta", "must be positive");
        }
        if !(c.eta2 > 0.0) {
            return bad("constraints.eta2", "must be positive");
        }
        if c.slack_step.is_some_and(|s| !(s > 0.0)) {
            return bad("constraints.slack_step", "must be positive");
        }
        let tr = &self.training;
        if tr.batch_size == 0 {
            return bad("training.batch_size", "must be at least 1");
        }
        if !(tr.eta1 > 0.0) {
            return bad("training.eta1", "must be positive");
        }
        if tr.variants.is_empty() {
            return bad("training.variants", "must name at least one variant");
        }
        if self.run.seeds.is_empty() {
            return bad("run.seeds", "must list at least one seed");
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.model.d.unwrap_or(match self.model.kind {
            ModelKind::Dust => 2 * self.task.n,
            _ => self.task.n,
        })
    }

    pub fn task_spec(&self) -> TaskSpec {
        let t = &self.task;
        match t.kind {
            TaskKind::Denoising => TaskSpec::Denoising {
                n: t.n,
                t: t.t,
                signal: SignalOptions {
                    structure: t.structure,
                    amplitude: t.amplitude,
                    offset: t.offset,
                    temporal_correlation: t.temporal_correlation,
                },
            },
            TaskKind::Classification => TaskSpec::Classification {
                n: t.n,
                t: t.t,
                classes: t.classes.unwrap_or(2),
                separation: t.separation.unwrap_or(1.0),
            },
        }
    }

    pub fn model_spec(&self, variant: Variant) -> ModelSpec {
        let m = &self.model;
        let nonlinearity = match (m.kind, m.nonlinearity) {
            (ModelKind::Generic, NonlinearityKind::SoftThreshold) => Nonlinearity::SoftThreshold(m.threshold),
            (ModelKind::Dust, _) => Nonlinearity::SoftThreshold(m.lambda1 / m.c),
            _ => Nonlinearity::Relu,
        };
        let shared_dictionary = match m.dictionary {
            DictionaryMode::Shared => true,
            DictionaryMode::PerLayer => false,
            DictionaryMode::Auto => variant == Variant::Unconstrained,
        };
        ModelSpec {
            kind: m.kind,
            n: self.task.n,
            d: self.d(),
            num_layers: m.layers,
            nonlinearity,
            orientation: m.orientation,
            eta: m.eta,
            dust: DustHyper {
                lambda1: m.lambda1,
                lambda2: m.lambda2,
                c: m.c,
            },
            shared_dictionary,
            residual_init: m.residual_init,
            classes: match self.task.kind {
                TaskKind::Classification => self.task.classes,
                TaskKind::Denoising => None,
            },
        }
    }

    pub fn schedule(&self) -> ConstraintSchedule {
        let c = &self.constraints;
        ConstraintSchedule {
            alpha: c
                .alpha_schedule
                .clone()
                .unwrap_or_else(|| vec![c.alpha; self.model.layers]),
            f0: c.f0,
        }
    }

    pub fn dual_state(&self) -> DualState {
        let c = &self.constraints;
        let mut d = DualState::new(self.model.layers, c.beta, c.eta2, c.resilient);
        d.slack_step = c.slack_step.unwrap_or(c.eta2);
        d.literal_decay = c.literal_decay;
        d
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            eta1: t.eta1,
            optimizer: match t.optimizer {
                OptimizerName::Sgd => OptimizerKind::Sgd,
                OptimizerName::Adam => OptimizerKind::Adam {
                    beta1: t.adam_beta1,
                    beta2: t.adam_beta2,
                    eps: t.adam_eps,
                },
            },
            primal_warmup_epochs: t.primal_warmup_epochs,
            restart_slack_each_epoch: t.restart_slack_each_epoch,
            shuffle: t.shuffle,
            seed,
            record_wall_time: t.record_wall_time,
        }
    }
}
