//! Error type shared by every module of the crate.

use thiserror::Error;

/// Failures raised by the solvers, kernels and samplers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecgramError {
    /// An input violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A spectral argument or test-function input lies outside the admissible domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A fixed-point iteration did not reach its tolerance.
    #[error("no convergence after {iterations} iterations (last residual {residual:.3e}) at z = {z}")]
    Iteration {
        iterations: usize,
        residual: f64,
        z: String,
    },

    /// A denominator in a kernel formula came too close to zero.
    #[error("singular kernel: {0}")]
    Singularity(String),

    /// A dense solve hit a pivot below the singularity threshold.
    #[error("singular linear system ({context}): pivot {pivot:.3e} at index {index}")]
    LinearAlgebra {
        context: String,
        index: usize,
        pivot: f64,
    },

    /// The integration contour is inconsistent with the profile or the test functions.
    #[error("contour error: {0}")]
    Contour(String),

    /// A variance estimate or parameter degenerated to a nonpositive value.
    #[error("degenerate variance: {0}")]
    Degenerate(String),

    /// A log argument or similar quantity left its admissible range.
    #[error("stability error: {0}")]
    Stability(String),

    /// A user-supplied sampler produced unusable values.
    #[error("sampling error: {0}")]
    Sampling(String),
}

impl SpecgramError {
    /// True for errors caused by bad inputs rather than numerical breakdown.
    pub fn is_config_error(&self) -> bool {
        matches!(self, SpecgramError::Validation(_) | SpecgramError::Contour(_))
    }
}

pub type Result<T> = std::result::Result<T, SpecgramError>;
