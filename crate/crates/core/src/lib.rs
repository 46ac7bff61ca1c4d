//! Layerwise descent constraints for attention-based unrolled models.
//!
//! The crate contains a small reverse-mode autodiff engine over dense
//! matrices, three layered architectures (a generic attention network,
//! an unrolled transformer and an unrolled sparse-coding network), a
//! primal-dual trainer that asks every layer to reduce the loss of the
//! previous one, synthetic data generators and the evaluation sweeps used
//! to study robustness under input perturbations.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod dct;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod error;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
