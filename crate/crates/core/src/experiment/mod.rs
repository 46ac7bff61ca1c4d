//! Config-driven experiments: training runs, sweeps and reports.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::Result;
use crate::models::ModelParams;
use crate::trainer::{erm_train, train, TrainingLog};

pub use config::{ExperimentConfig, TaskKind, Variant};

/// Directory of one seed's run: `<out>/<hash prefix>-seed<seed>`.
pub fn run_dir(out: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    out.join(format!("{}-seed{seed}", &cfg.hash()[..12]))
}

pub fn build_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    Dataset::build(
        &cfg.task_spec(),
        cfg.task.train_samples,
        cfg.task.held_out_samples,
        cfg.task.gamma_train,
        seed,
    )
}

/// A trained model and its log. `result` holds the training error, if any;
/// the log then covers the batches completed before it.
pub struct TrainedVariant {
    pub variant: Variant,
    pub params: ModelParams,
    pub log: TrainingLog,
    pub result: Result<()>,
}

/// Trains one variant from the seed's initialization.
pub fn train_variant(cfg: &ExperimentConfig, data: &Dataset, variant: Variant, seed: u64) -> Result<TrainedVariant> {
    let mut params = ModelParams::init(cfg.model_spec(variant), seed)?;
    let mut log = TrainingLog::new(cfg.model.layers);
    let tc = cfg.train_config(seed);
    let result = match variant {
        Variant::Constrained => {
            let mut dual = cfg.dual_state();
            train(&mut params, &data.train, &cfg.schedule(), &mut dual, &tc, &mut log)
        }
        Variant::Unconstrained => erm_train(&mut params, &data.train, &tc, &mut log),
    };
    Ok(TrainedVariant {
        variant,
        params,
        log,
        result,
    })
}
