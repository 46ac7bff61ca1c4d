//! The `train`, `sweep`, `gradcheck` and `ratio-report` commands.
//!
//! Commands write their artifacts to disk and a human-readable report to
//! the given writer; the binary only parses arguments and maps errors to
//! exit codes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{ratio_stats, sweep, write_layer_losses_csv, write_metrics_csv, Metric, RatioStats, SweepEntry, SweepResult};
use crate::gradcheck::{run_suite, CheckResult, GradCheck, TOLERANCE};
use crate::models::checkpoint::{Checkpoint, CheckpointMeta};

use super::{build_dataset, run_dir, train_variant, ExperimentConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_INFO_FILE: &str = "run_info.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAYER_LOSSES_FILE: &str = "layer_losses.csv";
pub const HISTOGRAM_FILE: &str = "ratio_histogram.csv";

pub fn checkpoint_file(tag: &str) -> String {
    format!("{tag}.ckpt")
}

pub fn log_file(tag: &str) -> String {
    format!("{tag}_log.csv")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_to_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_file(path, &buf)
}

fn report(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<output>", e))
}

fn seeds(cfg: &ExperimentConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| cfg.run.seeds.clone(), |s| vec![s])
}

fn output_root(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map_or_else(|| PathBuf::from(&cfg.run.output_dir), Path::to_path_buf)
}

/// Trains every configured variant for every seed. Returns the run
/// directories. A failed run keeps the partial log of the failing variant.
pub fn cmd_train(config_path: &Path, out: Option<&Path>, seed: Option<u64>, report_to: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let raw = fs::read(config_path).map_err(|e| Error::io(config_path, e))?;
    let cfg = ExperimentConfig::load(config_path)?;
    let root = output_root(&cfg, out);
    let mut dirs = Vec::new();
    for seed in seeds(&cfg, seed) {
        let dir = run_dir(&root, &cfg, seed);
        create_dir(&dir)?;
        write_file(&dir.join(CONFIG_FILE), &raw)?;
        let data = build_dataset(&cfg, seed)?;
        let info = format!(
            "config_hash = {}\nseed = {seed}\nsigma_x = {}\ntrain_samples = {}\nheld_out_samples = {}\n",
            cfg.hash(),
            data.sigma_x,
            data.train.len(),
            data.held_out.len()
        );
        write_file(&dir.join(RUN_INFO_FILE), info.as_bytes())?;
        for &variant in &cfg.training.variants {
            let tag = variant.tag();
            ::log::info!("seed {seed}: training {tag}");
            let trained = train_variant(&cfg, &data, variant, seed)?;
            csv_to_file(&dir.join(log_file(tag)), |b| trained.log.write_csv(b))?;
            trained.result?;
            let ck = Checkpoint {
                params: trained.params,
                meta: CheckpointMeta {
                    tag: tag.to_string(),
                    seed,
                    sigma_x: data.sigma_x,
                },
            };
            ck.save(&dir.join(checkpoint_file(tag)))?;
            let last = trained.log.records.last().map(|r| r.losses.clone()).unwrap_or_default();
            report(report_to, format_args!("seed {seed} {tag}: final batch losses {last:?}"))?;
        }
        report(report_to, format_args!("wrote {}", dir.display()))?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Errors unless the checkpoint was built for this config's task.
pub fn check_compatible(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<()> {
    let s = &ck.params.spec;
    let expected = cfg.model_spec(super::Variant::Constrained);
    let mismatch = |what: &str, a: String, b: String| {
        Err(Error::Contract(format!(
            "checkpoint `{}` does not match config: {what} {a} vs {b}",
            ck.meta.tag
        )))
    };
    if s.kind != expected.kind {
        return mismatch("model kind", format!("{:?}", s.kind), format!("{:?}", expected.kind));
    }
    if s.n != expected.n {
        return mismatch("n", s.n.to_string(), expected.n.to_string());
    }
    if s.num_layers != expected.num_layers {
        return mismatch("layers", s.num_layers.to_string(), expected.num_layers.to_string());
    }
    if s.classes != expected.classes {
        return mismatch("classes", format!("{:?}", s.classes), format!("{:?}", expected.classes));
    }
    Ok(())
}

fn dataset_for(cache: &mut BTreeMap<u64, Dataset>, cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Dataset> {
    let seed = ck.meta.seed;
    let data = match cache.entry(seed) {
        std::collections::btree_map::Entry::Occupied(e) => e.get().clone(),
        std::collections::btree_map::Entry::Vacant(e) => e.insert(build_dataset(cfg, seed)?).clone(),
    };
    if data.sigma_x.to_bits() != ck.meta.sigma_x.to_bits() {
        return Err(Error::Contract(format!(
            "checkpoint `{}` was trained on data with sigma_x {} but the config gives {}",
            ck.meta.tag, ck.meta.sigma_x, data.sigma_x
        )));
    }
    Ok(data)
}

fn default_checkpoints(cfg: &ExperimentConfig, root: &Path, seed: Option<u64>) -> Vec<PathBuf> {
    seeds(cfg, seed)
        .into_iter()
        .flat_map(|s| {
            let dir = run_dir(root, cfg, s);
            cfg.training
                .variants
                .iter()
                .map(move |v| dir.join(checkpoint_file(v.tag())))
        })
        .collect()
}

pub struct SweepOutput {
    pub metric: Metric,
    pub results: Vec<SweepResult>,
    pub dir: PathBuf,
}

/// Evaluates checkpoints over the config's perturbation grid. Without
/// explicit checkpoints, uses those of the config's own runs.
pub fn cmd_sweep(
    config_path: &Path,
    checkpoints: &[PathBuf],
    out: Option<&Path>,
    seed: Option<u64>,
    report_to: &mut dyn Write,
) -> Result<SweepOutput> {
    let cfg = ExperimentConfig::load(config_path)?;
    let root = output_root(&cfg, out);
    let paths = if checkpoints.is_empty() {
        default_checkpoints(&cfg, &root, seed)
    } else {
        checkpoints.to_vec()
    };
    let mut cache = BTreeMap::new();
    let mut results = Vec::new();
    let mut metric = Metric::Rmse;
    for path in &paths {
        let ck = Checkpoint::load(path)?;
        check_compatible(&cfg, &ck)?;
        let data = dataset_for(&mut cache, &cfg, &ck)?;
        let sets = data.eval_sets(&cfg.task.gamma_grid, ck.meta.seed)?;
        let entry = SweepEntry {
            tag: ck.meta.tag.clone(),
            seed: ck.meta.seed,
            model: &ck.params,
        };
        let (m, mut r) = sweep(&[entry], &sets)?;
        metric = m;
        let r = r.remove(0);
        report(
            report_to,
            format_args!("{} seed {}: {} auc {} (raw {})", r.tag, r.seed, m.name(), r.auc, r.auc_raw),
        )?;
        results.push(r);
    }
    create_dir(&root)?;
    csv_to_file(&root.join(METRICS_FILE), |b| write_metrics_csv(&results, b))?;
    csv_to_file(&root.join(LAYER_LOSSES_FILE), |b| write_layer_losses_csv(&results, b))?;
    report(report_to, format_args!("wrote {}", root.join(METRICS_FILE).display()))?;
    Ok(SweepOutput {
        metric,
        results,
        dir: root,
    })
}

/// Runs the finite-difference suite and prints the worst error per check.
/// Returns whether every check passed.
pub fn cmd_gradcheck(checks: &[GradCheck], instances: usize, seed: u64, report_to: &mut dyn Write) -> Result<(bool, Vec<CheckResult>)> {
    let results = run_suite(checks, instances, seed);
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        match &r.error {
            Some(e) => report(report_to, format_args!("{status} {:<16} error: {e}", r.name))?,
            None => report(
                report_to,
                format_args!("{status} {:<16} worst relative error {:.3e} over {} instances", r.name, r.worst, r.instances),
            )?,
        }
    }
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failing.is_empty() {
        report(report_to, format_args!("all {} checks within {TOLERANCE:e}", results.len()))?;
    } else {
        report(report_to, format_args!("failing: {}", failing.join(", ")))?;
    }
    Ok((failing.is_empty(), results))
}

/// Layerwise loss ratios of a checkpoint on held-out data at the training
/// noise level. Writes the histogram next to the checkpoint unless `out`
/// is given.
pub fn cmd_ratio_report(
    config_path: &Path,
    checkpoint: &Path,
    out: Option<&Path>,
    report_to: &mut dyn Write,
) -> Result<RatioStats> {
    let cfg = ExperimentConfig::load(config_path)?;
    let ck = Checkpoint::load(checkpoint)?;
    check_compatible(&cfg, &ck)?;
    let data = dataset_for(&mut BTreeMap::new(), &cfg, &ck)?;
    let set = data
        .eval_sets(&[cfg.task.gamma_train], ck.meta.seed)?
        .remove(0);
    let stats = ratio_stats(&ck.params, &set.examples, cfg.constraints.alpha)?;
    report(report_to, format_args!("checkpoint      {}", checkpoint.display()))?;
    report(report_to, format_args!("ratios          {} ({} excluded)", stats.count, stats.excluded))?;
    report(report_to, format_args!("mean            {}", stats.mean))?;
    report(report_to, format_args!("median          {}", stats.median))?;
    report(report_to, format_args!("descending      {}", stats.fraction_descending))?;
    report(report_to, format_args!("meeting alpha   {}", stats.fraction_meeting_alpha))?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    create_dir(&dir)?;
    csv_to_file(&dir.join(HISTOGRAM_FILE), |b| stats.write_histogram_csv(b))?;
    Ok(stats)
}
