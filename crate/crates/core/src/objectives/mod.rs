//! Unlearning objectives: smoothed labels, the smoothed gradient-ascent loss
//! and its combined update direction, and the baseline methods it is
//! compared against.
//!
//! Sign convention: the forget term `L_f` is the *negated* cross-entropy on
//! the forget batch, so every objective here is minimized and descending
//! `L_f` ascends the forget cross-entropy. With `g_f = ∇L_f`, plain gradient
//! ascent moves along `−g_f`.

mod config;
mod label;
mod losses;
mod transfer;

#[cfg(test)]
mod tests;

use thiserror::Error;

use crate::autodiff::TensorError;
use crate::lm::ModelError;

pub use config::{Divergence, Method, UnlearnMethodConfig};
pub use label::{gls_smooth, sga_label, sga_update_direction, SmoothedLabel};
pub use losses::{
    flat_loss, gradient_ascent_loss, gradient_difference_loss, kl_regularized_loss, method_loss,
    preference_loss, random_completion_loss, sga_loss, LossBreakdown, Objective, ObjectiveInputs,
    PreferenceVariant, RandomVariant,
};
pub use transfer::{task_vector_unlearn, whp_distribution, WhpModel};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("normal set required")]
    NormalSetRequired,
    #[error("slot count K must be at least {min}, got {k}")]
    InvalidK { k: usize, min: usize },
    #[error("{method} requires {what}")]
    MissingInput {
        method: &'static str,
        what: &'static str,
    },
    #[error("{0} rows in the forget batch but {1} in the paired batch")]
    Misaligned(usize, usize),
    #[error("reference checkpoint config differs from the trained model")]
    ConfigMismatch,
    #[error("vector of length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown divergence '{0}'")]
    UnknownDivergence(String),
    #[error("unknown method '{0}'")]
    UnknownMethod(String),
    #[error("degenerate WHP distribution")]
    DegenerateWhp,
    #[error("input distribution sums to {0}, not 1")]
    NotADistribution(f64),
    #[error("invalid method config: {0}")]
    InvalidConfig(String),
    #[error("{0} has no differentiable loss")]
    NotALoss(&'static str),
}
