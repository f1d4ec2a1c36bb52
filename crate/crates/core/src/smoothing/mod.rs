//! Gradient geometry of the smoothed objective: the deflection vector `u`,
//! the one-step update `d(r)`, the norm-minimizing rate `r*`, and
//! per-instance sign profiles of `<g_f, u>`.

mod bundle;
mod profile;

#[cfg(test)]
mod tests;

use thiserror::Error;

use crate::lm::ModelError;

pub use bundle::{
    deflection_vector, dot, forget_gradient, normal_gradient, optimal_smoothing_rate,
    update_vector, GradientBundle, RateDiagnostics, ZERO_TOL,
};
pub use profile::{instance_bundles, sign_profile, Sign, SignProfile, SignRow, SignSummary};

#[derive(Debug, Error)]
pub enum SmoothingError {
    #[error("gradient of length {got} in a bundle of dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("slot count K must be at least 1, got {0}")]
    InvalidK(usize),
    #[error("degenerate deflection (u≈0): r* undefined")]
    DegenerateDeflection,
    #[error("no gradient bundles")]
    Empty,
    #[error("{0} forget records but {1} normal groups")]
    Misaligned(usize, usize),
    #[error("malformed sign profile: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
