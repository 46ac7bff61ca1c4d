//! Discrete cosine transform bases and overcomplete DCT dictionaries.
//!
//! Signals of length `n = p²` are treated as `p × p` patches and use the
//! separable 2-D basis; other lengths use the 1-D DCT-II basis. Columns are
//! ordered from low to high frequency.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Orthonormal DCT-II basis, one atom per column.
pub fn dct_basis_1d(n: usize) -> Tensor {
    Tensor::from_fn(n, n, |i, k| {
        let s = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        s * (PI * (i as f64 + 0.5) * k as f64 / n as f64).cos()
    })
}

fn patch_side(n: usize) -> Option<usize> {
    let p = (n as f64).sqrt().round() as usize;
    (p >= 2 && p * p == n).then_some(p)
}

/// Unit-norm cosine atom `cos(π (i + ½) f / n)` over `n` samples.
fn cosine_atom(n: usize, f: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..n)
        .map(|i| (PI * (i as f64 + 0.5) * f / n as f64).cos())
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn kron_atom(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)).collect()
}

/// Atoms indexed by frequency pairs on a grid with `steps` frequencies per
/// axis spanning `[0, p)`, sorted by total frequency.
fn patch_atoms(p: usize, steps: usize, keep: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
    let mut idx: Vec<(usize, usize)> = (0..steps)
        .flat_map(|a| (0..steps).map(move |b| (a, b)))
        .filter(|&(a, b)| keep(a, b))
        .collect();
    idx.sort_by_key(|&(a, b)| (a + b, a));
    let scale = p as f64 / steps as f64;
    idx.into_iter()
        .map(|(a, b)| {
            kron_atom(
                &cosine_atom(p, a as f64 * scale),
                &cosine_atom(p, b as f64 * scale),
            )
        })
        .collect()
}

fn columns_to_tensor(n: usize, cols: &[Vec<f64>]) -> Tensor {
    Tensor::from_fn(n, cols.len(), |i, j| cols[j][i])
}

/// Orthonormal basis used for signals of length `n`.
pub fn signal_basis(n: usize) -> Tensor {
    match patch_side(n) {
        Some(p) => columns_to_tensor(n, &patch_atoms(p, p, |_, _| true)),
        None => dct_basis_1d(n),
    }
}

/// Overcomplete DCT dictionary with `codes ≥ n` unit-norm atoms.
///
/// The first `n` atoms are [`signal_basis`]`(n)`. The remaining atoms come
/// from the half-integer frequencies of a DCT frame with twice the frequency
/// resolution, lowest first; if more atoms are requested than that frame
/// provides, the full list is tiled.
pub fn overcomplete_dictionary(n: usize, codes: usize) -> Result<Tensor> {
    if codes < n {
        return Err(Error::param(format!(
            "dictionary needs at least {n} atoms, got {codes}"
        )));
    }
    let basis = signal_basis(n);
    let mut atoms: Vec<Vec<f64>> = (0..n).map(|j| basis.column(j)).collect();
    let extras: Vec<Vec<f64>> = match patch_side(n) {
        Some(p) => patch_atoms(p, 2 * p, |a, b| a % 2 == 1 || b % 2 == 1),
        None => (0..2 * n)
            .filter(|j| j % 2 == 1)
            .map(|j| cosine_atom(n, j as f64 / 2.0))
            .collect(),
    };
    let pool: Vec<Vec<f64>> = atoms.iter().chain(&extras).cloned().collect();
    for k in 0..codes - n {
        let atom = match extras.get(k) {
            Some(a) => a.clone(),
            None => pool[(k - extras.len()) % pool.len()].clone(),
        };
        atoms.push(atom);
    }
    Ok(columns_to_tensor(n, &atoms))
}
