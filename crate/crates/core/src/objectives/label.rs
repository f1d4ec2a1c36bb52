use serde::{Deserialize, Serialize};

use crate::smoothing::GradientBundle;

use super::ObjectiveError;

/// `(1 − r)·y + (r/K)·1` for a `K`-slot label `y`.
pub fn gls_smooth(y: &[f64], r: f64) -> Vec<f64> {
    let k = y.len() as f64;
    y.iter().map(|v| (1.0 - r) * v + r / k).collect()
}

/// The smoothed ascent label in two forms: the signed `K`-vector
/// `(−(1 − (K−1)r/K), −r/K, …)` and the loss coefficients `(w_f, w_p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedLabel {
    pub k: usize,
    pub r: f64,
    /// `1 − r + r/K`.
    pub w_f: f64,
    /// `r/K`.
    pub w_p: f64,
    pub signed: Vec<f64>,
}

/// `(w_f, w_p)` with `w_f` written as `1 − (K−1)·w_p`, which equals
/// `1 − r + r/K` and keeps `w_f + (K−1)·w_p = 1` exact in floating point.
fn coefficients(k: usize, r: f64) -> (f64, f64) {
    let w_p = r / k as f64;
    (1.0 - (k - 1) as f64 * w_p, w_p)
}

pub fn sga_label(k: usize, r: f64) -> Result<SmoothedLabel, ObjectiveError> {
    if k < 2 {
        return Err(ObjectiveError::InvalidK { k, min: 2 });
    }
    let kf = k as f64;
    let (w_f, w_p) = coefficients(k, r);
    let mut signed = vec![-r / kf; k];
    signed[0] = -(1.0 - (kf - 1.0) * r / kf);
    Ok(SmoothedLabel {
        k,
        r,
        w_f,
        w_p,
        signed,
    })
}

/// `−[(1 − r + r/K)·g_f + (r/K)·Σ_k g_p^(k)]`.
pub fn sga_update_direction(b: &GradientBundle, r: f64) -> Vec<f64> {
    let (w_f, w_p) = coefficients(b.k(), r);
    let mut out: Vec<f64> = b.g_f().iter().map(|g| w_f * g).collect();
    for g in b.g_p() {
        for (o, x) in out.iter_mut().zip(g) {
            *o += w_p * x;
        }
    }
    out.iter_mut().for_each(|o| *o = -*o);
    out
}
