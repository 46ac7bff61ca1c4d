//! Synthetic denoising and classification tasks.
//!
//! Sample `i` of a generator draws from its own random stream
//! `(seed, domain, i)`, so datasets can be produced in any order or in
//! parallel and still be bit-identical. Training data uses indices
//! `0..train`, held-out data the following `held_out` indices.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::dct::signal_basis;
use crate::error::{Error, Result};
use crate::models::{Example, Target};
use crate::rng::{self, normal, Domain};
use crate::tensor::Tensor;

/// Test perturbation grid.
pub const GAMMA_GRID: [f64; 9] = [0.01, 0.05, 0.1, 0.2, 0.25, 0.5, 0.75, 1.0, 1.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Random combinations of the lowest `⌈N/4⌉` DCT atoms.
    Smooth,
    /// `⌈N/8⌉` nonzero DCT coefficients per column.
    SparseDct,
}

/// Shape of the clean signal distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalOptions {
    pub structure: Structure,
    /// Scale applied to every DCT coefficient.
    pub amplitude: f64,
    /// Constant added to every entry.
    pub offset: f64,
    /// Correlation `ρ ∈ [0, 1]` between the coefficients of different
    /// columns of one sequence. Marginals stay standard normal.
    pub temporal_correlation: f64,
}

impl Default for SignalOptions {
    fn default() -> Self {
        SignalOptions {
            structure: Structure::Smooth,
            amplitude: 1.0,
            offset: 0.0,
            temporal_correlation: 0.0,
        }
    }
}

impl SignalOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.temporal_correlation) {
            return Err(Error::param("temporal_correlation must lie in [0, 1]"));
        }
        if !(self.amplitude > 0.0) || !self.offset.is_finite() {
            return Err(Error::param("amplitude must be positive and offset finite"));
        }
        Ok(())
    }
}

/// Number of active DCT atoms for `n`-dimensional signals.
pub fn active_atoms(structure: Structure, n: usize) -> usize {
    match structure {
        Structure::Smooth => n.div_ceil(4),
        Structure::SparseDct => n.div_ceil(8),
    }
}

fn clean_signal(n: usize, t: usize, opts: &SignalOptions, basis: &Tensor, seed: u64, index: u64) -> Tensor {
    let mut r = rng::stream(seed, Domain::CleanSignal, index);
    let k = active_atoms(opts.structure, n);
    let rho = opts.temporal_correlation;
    let atoms: Vec<usize> = match opts.structure {
        Structure::Smooth => (0..k).collect(),
        Structure::SparseDct => {
            let mut a = sample_indices(&mut r, n, k).into_vec();
            a.sort_unstable();
            a
        }
    };
    let shared: Vec<f64> = (0..k).map(|_| normal(&mut r)).collect();
    let mut coef = Tensor::zeros(n, t);
    for col in 0..t {
        for (j, &atom) in atoms.iter().enumerate() {
            let own = normal(&mut r);
            let c = if rho > 0.0 {
                rho.sqrt() * shared[j] + (1.0 - rho).sqrt() * own
            } else {
                own
            };
            // keep sparse coefficients clear of zero so the support is exact
            let c = if opts.structure == Structure::SparseDct && c.abs() < 0.1 {
                0.1f64.copysign(c)
            } else {
                c
            };
            coef.set(atom, col, opts.amplitude * c);
        }
    }
    basis
        .matmul(&coef)
        .expect("basis is n×n")
        .map(|v| v + opts.offset)
}

/// `count` clean `n × t` signals for sample indices `start..start + count`.
pub fn gen_denoising_range(
    start: u64,
    count: usize,
    n: usize,
    t: usize,
    opts: &SignalOptions,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if n == 0 || t == 0 {
        return Err(Error::param("signal dimensions must be positive"));
    }
    opts.validate()?;
    let basis = signal_basis(n);
    Ok((0..count as u64)
        .map(|i| clean_signal(n, t, opts, &basis, seed, start + i))
        .collect())
}

pub fn gen_denoising(count: usize, n: usize, t: usize, opts: &SignalOptions, seed: u64) -> Result<Vec<Tensor>> {
    gen_denoising_range(0, count, n, t, opts, seed)
}

/// Global standard deviation of all entries.
pub fn global_std(data: &[Tensor]) -> f64 {
    let count: usize = data.iter().map(Tensor::len).sum();
    if count == 0 {
        return 0.0;
    }
    let mean = data.iter().map(Tensor::sum).sum::<f64>() / count as f64;
    let ss: f64 = data
        .iter()
        .flat_map(|x| x.data())
        .map(|v| (v - mean) * (v - mean))
        .sum();
    (ss / count as f64).sqrt()
}

/// Where the noise for one sample comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub gamma: f64,
    pub seed: u64,
    pub domain: Domain,
    pub index: u64,
}

/// Adds i.i.d. Gaussian noise with standard deviation `γ·σ_x`.
pub fn perturb(clean: &Tensor, spec: &PerturbationSpec, sigma_x: f64) -> Result<Tensor> {
    if !(spec.gamma >= 0.0) {
        return Err(Error::param(format!("gamma must be nonnegative, got {}", spec.gamma)));
    }
    if spec.gamma == 0.0 {
        return Ok(clean.clone());
    }
    if !(sigma_x > 0.0) {
        return Err(Error::param("sigma_x must be positive"));
    }
    let sigma = spec.gamma * sigma_x;
    let mut r = rng::stream2(spec.seed, spec.domain, spec.gamma.to_bits(), spec.index);
    Ok(clean.map(|v| v + sigma * normal(&mut r)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingSample {
    pub clean: Tensor,
    pub noisy: Tensor,
    pub gamma: f64,
}

impl From<DenoisingSample> for Example {
    fn from(s: DenoisingSample) -> Self {
        Example {
            input: s.noisy,
            target: Target::Clean(s.clean),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationSample {
    pub embeddings: Tensor,
    pub label: usize,
    pub gamma: f64,
}

impl From<ClassificationSample> for Example {
    fn from(s: ClassificationSample) -> Self {
        Example {
            input: s.embeddings,
            target: Target::Label(s.label),
        }
    }
}

/// Class mean patterns, constant along the sequence, pairwise Frobenius
/// distance exactly `separation`.
pub fn class_means(n: usize, t: usize, classes: usize, separation: f64, seed: u64) -> Result<Vec<Tensor>> {
    if classes < 2 {
        return Err(Error::param("need at least two classes"));
    }
    if !(separation > 0.0) {
        return Err(Error::param("separation must be positive"));
    }
    if classes > n {
        return Err(Error::param(format!(
            "{classes} classes need embedding dimension at least {classes}, got {n}"
        )));
    }
    let mut r = rng::stream(seed, Domain::ClassMeans, 0);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while dirs.len() < classes {
        let mut v: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
        for d in &dirs {
            let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            dirs.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    // orthonormal directions at radius s are s·√2 apart
    let s = separation / std::f64::consts::SQRT_2 / (t as f64).sqrt();
    Ok(dirs
        .into_iter()
        .map(|d| Tensor::from_fn(n, t, |i, _| s * d[i]))
        .collect())
}

/// Samples `μ_label + ε`, `ε` unit Gaussian, for indices `start..start + count`.
/// Labels cycle through the classes.
pub fn gen_classification_range(
    start: u64,
    count: usize,
    means: &[Tensor],
    seed: u64,
) -> Vec<ClassificationSample> {
    (0..count as u64)
        .map(|i| {
            let idx = start + i;
            let label = (idx % means.len() as u64) as usize;
            let mut r = rng::stream(seed, Domain::CleanSignal, idx);
            ClassificationSample {
                embeddings: means[label].map(|m| m + normal(&mut r)),
                label,
                gamma: 0.0,
            }
        })
        .collect()
}

pub fn gen_classification(
    count: usize,
    n: usize,
    t: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Vec<ClassificationSample>> {
    let means = class_means(n, t, classes, separation, seed)?;
    Ok(gen_classification_range(0, count, &means, seed))
}

/// Index of the closest mean in Frobenius distance.
pub fn nearest_mean(x: &Tensor, means: &[Tensor]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, m) in means.iter().enumerate() {
        let d = x.sub(m).expect("same shape").frobenius_sq();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Held-out examples at one perturbation level.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub gamma: f64,
    pub in_distribution: bool,
    pub examples: Vec<Example>,
}

/// One evaluation set per grid value (sorted, duplicates removed), each
/// perturbing the same held-out inputs with fresh noise. `first_index` is
/// the sample index of `held_out[0]`.
pub fn split_id_ood(
    held_out: &[Example],
    first_index: u64,
    gamma_train: f64,
    gamma_grid: &[f64],
    sigma_x: f64,
    seed: u64,
) -> Result<Vec<EvalSet>> {
    if gamma_grid.is_empty() {
        return Err(Error::param("gamma grid is empty"));
    }
    let mut grid = gamma_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid.into_iter()
        .map(|gamma| {
            let examples = held_out
                .iter()
                .enumerate()
                .map(|(i, ex)| {
                    let spec = PerturbationSpec {
                        gamma,
                        seed,
                        domain: Domain::EvalNoise,
                        index: first_index + i as u64,
                    };
                    Ok(Example {
                        input: perturb(&ex.input, &spec, sigma_x)?,
                        target: ex.target.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalSet {
                gamma,
                in_distribution: gamma <= gamma_train,
                examples,
            })
        })
        .collect()
}

/// Task description sufficient to regenerate a dataset from a seed.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSpec {
    Denoising {
        n: usize,
        t: usize,
        signal: SignalOptions,
    },
    Classification {
        n: usize,
        t: usize,
        classes: usize,
        separation: f64,
    },
}

/// Training and held-out examples plus the clean-data scale.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// Inputs perturbed at `gamma_train`.
    pub train: Vec<Example>,
    /// Unperturbed held-out inputs; see [`split_id_ood`].
    pub held_out: Vec<Example>,
    /// Sample index of `held_out[0]`.
    pub held_out_start: u64,
    pub sigma_x: f64,
    pub gamma_train: f64,
}

impl Dataset {
    pub fn build(task: &TaskSpec, train: usize, held_out: usize, gamma_train: f64, seed: u64) -> Result<Self> {
        let (clean_train, clean_held): (Vec<Example>, Vec<Example>) = match task {
            TaskSpec::Denoising { n, t, signal } => {
                let wrap = |xs: Vec<Tensor>| -> Vec<Example> {
                    xs.into_iter()
                        .map(|x| Example {
                            input: x.clone(),
                            target: Target::Clean(x),
                        })
                        .collect()
                };
                (
                    wrap(gen_denoising_range(0, train, *n, *t, signal, seed)?),
                    wrap(gen_denoising_range(train as u64, held_out, *n, *t, signal, seed)?),
                )
            }
            TaskSpec::Classification {
                n,
                t,
                classes,
                separation,
            } => {
                let means = class_means(*n, *t, *classes, *separation, seed)?;
                let wrap = |xs: Vec<ClassificationSample>| -> Vec<Example> {
                    xs.into_iter().map(Example::from).collect()
                };
                (
                    wrap(gen_classification_range(0, train, &means, seed)),
                    wrap(gen_classification_range(train as u64, held_out, &means, seed)),
                )
            }
        };
        let inputs: Vec<Tensor> = clean_train.iter().map(|e| e.input.clone()).collect();
        let sigma_x = global_std(&inputs);
        let train = clean_train
            .into_iter()
            .enumerate()
            .map(|(i, ex)| {
                let spec = PerturbationSpec {
                    gamma: gamma_train,
                    seed,
                    domain: Domain::TrainNoise,
                    index: i as u64,
                };
                Ok(Example {
                    input: perturb(&ex.input, &spec, sigma_x)?,
                    target: ex.target,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            train,
            held_out: clean_held,
            held_out_start: inputs.len() as u64,
            sigma_x,
            gamma_train,
        })
    }

    pub fn eval_sets(&self, gamma_grid: &[f64], seed: u64) -> Result<Vec<EvalSet>> {
        split_id_ood(
            &self.held_out,
            self.held_out_start,
            self.gamma_train,
            gamma_grid,
            self.sigma_x,
            seed,
        )
    }
}

const CACHE_MAGIC: &[u8; 8] = b"DSCNTDAT";
const CACHE_VERSION: u32 = 1;

/// Header of a dataset cache file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheHeader {
    /// 0 denoising, 1 classification.
    pub task_kind: u8,
    pub n: u32,
    pub t: u32,
    pub classes: u32,
    pub count: u32,
    pub seed: u64,
}

/// Writes examples after a header. Each record is the row-major input
/// followed by either the row-major clean target or a `u32` label.
pub fn write_cache(path: &Path, header: &CacheHeader, examples: &[Example]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.push(header.task_kind);
    for v in [header.n, header.t, header.classes, header.count] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&header.seed.to_le_bytes());
    if examples.len() != header.count as usize {
        return Err(Error::contract("cache header count does not match examples"));
    }
    for ex in examples {
        if ex.input.shape() != [header.n as usize, header.t as usize] {
            return Err(Error::contract("cache example has wrong shape"));
        }
        buf.extend(ex.input.data().iter().flat_map(|v| v.to_le_bytes()));
        match (&ex.target, header.task_kind) {
            (Target::Clean(c), 0) => buf.extend(c.data().iter().flat_map(|v| v.to_le_bytes())),
            (Target::Label(l), 1) => buf.extend_from_slice(&(*l as u32).to_le_bytes()),
            _ => return Err(Error::contract("cache target does not match task kind")),
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("dataset cache truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let data = self
            .take(8 * rows * cols)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(rows, cols, data)
    }
}

pub fn read_cache(path: &Path) -> Result<(CacheHeader, Vec<Example>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != CACHE_MAGIC {
        return Err(Error::Format("bad dataset cache magic".into()));
    }
    if c.u32()? != CACHE_VERSION {
        return Err(Error::Format("unsupported dataset cache version".into()));
    }
    let task_kind = c.take(1)?[0];
    let header = CacheHeader {
        task_kind,
        n: c.u32()?,
        t: c.u32()?,
        classes: c.u32()?,
        count: c.u32()?,
        seed: u64::from_le_bytes(c.take(8)?.try_into().unwrap()),
    };
    let (n, t) = (header.n as usize, header.t as usize);
    let mut examples = Vec::with_capacity(header.count as usize);
    for _ in 0..header.count {
        let input = c.tensor(n, t)?;
        let target = match task_kind {
            0 => Target::Clean(c.tensor(n, t)?),
            1 => Target::Label(c.u32()? as usize),
            k => return Err(Error::Format(format!("unknown task kind {k}"))),
        };
        examples.push(Example { input, target });
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes in dataset cache".into()));
    }
    Ok((header, examples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_deterministic() {
        let o = SignalOptions::default();
        assert!(gen_denoising(0, 16, 8, &o, 1).unwrap().is_empty());
        assert_eq!(
            gen_denoising(3, 16, 8, &o, 1).unwrap(),
            gen_denoising(3, 16, 8, &o, 1).unwrap()
        );
        assert_ne!(
            gen_denoising(1, 16, 8, &o, 1).unwrap(),
            gen_denoising(1, 16, 8, &o, 2).unwrap()
        );
    }

    #[test]
    fn zero_gamma_is_identity() {
        let x = gen_denoising(1, 9, 4, &SignalOptions::default(), 3).unwrap().remove(0);
        let spec = PerturbationSpec {
            gamma: 0.0,
            seed: 1,
            domain: Domain::EvalNoise,
            index: 0,
        };
        assert_eq!(perturb(&x, &spec, 1.0).unwrap(), x);
        let neg = PerturbationSpec { gamma: -0.1, ..spec };
        assert!(perturb(&x, &neg, 1.0).is_err());
    }

    #[test]
    fn balanced_labels() {
        let s = gen_classification(12, 4, 2, 3, 2.0, 5).unwrap();
        for c in 0..3 {
            assert_eq!(s.iter().filter(|x| x.label == c).count(), 4);
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskSpec::Classification {
            n: 4,
            t: 3,
            classes: 2,
            separation: 1.0,
        };
        let ds = Dataset::build(&task, 5, 2, 0.1, 8).unwrap();
        let header = CacheHeader {
            task_kind: 1,
            n: 4,
            t: 3,
            classes: 2,
            count: 5,
            seed: 8,
        };
        let path = dir.path().join("train.bin");
        write_cache(&path, &header, &ds.train).unwrap();
        let (h, ex) = read_cache(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(ex, ds.train);

        let dn = TaskSpec::Denoising {
            n: 4,
            t: 3,
            signal: SignalOptions::default(),
        };
        let ds = Dataset::build(&dn, 3, 1, 0.1, 8).unwrap();
        let header = CacheHeader {
            task_kind: 0,
            count: 3,
            ..header
        };
        write_cache(&path, &header, &ds.train).unwrap();
        assert_eq!(read_cache(&path).unwrap().1, ds.train);
    }
}
