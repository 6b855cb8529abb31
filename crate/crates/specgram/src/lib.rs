//! Spectral fluctuations of sparse Gram matrices with a variance profile.
//!
//! The model is `S = Y Y*` with `y_ij = b_ij w_ij / sqrt(n s)`, where the
//! `b_ij` are Bernoulli(s) masks, `s = q²/n`, and `w_ij` has variance `σ²_ij`.
//! The crate provides
//!
//! - [`profile`]: variance profiles, sparsity settings and entry models;
//! - [`detequiv`]: the canonical fixed-point system and its Stieltjes transforms;
//! - [`fluct`]: mean and covariance kernels of linear spectral statistics and their contour integrals;
//! - [`simulate`]: samplers and Monte Carlo batteries;
//! - [`mimo`]: the fading-matrix equality test and mutual-information outage analysis.

// Negated comparisons are used on purpose so that NaN inputs fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detequiv;
pub mod error;
pub mod fluct;
pub mod linalg;
pub mod mimo;
pub mod par;
pub mod profile;
pub mod simulate;
pub mod stats;

pub use error::{Result, SpecgramError};
pub use linalg::C64;
