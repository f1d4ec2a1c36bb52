use serde::{Deserialize, Serialize};

use crate::lm::{sft_loss, Checkpoint, SequenceBatch};

use super::SmoothingError;

/// Magnitudes at or below this are treated as zero.
pub const ZERO_TOL: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forget gradient `g_f` and normal gradients `g_p^(k)` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    g_f: Vec<f64>,
    g_p: Vec<Vec<f64>>,
    g_p_bar: Vec<f64>,
    k: usize,
}

impl GradientBundle {
    pub fn new(g_f: Vec<f64>, g_p: Vec<Vec<f64>>, k: usize) -> Result<Self, SmoothingError> {
        if k == 0 {
            return Err(SmoothingError::InvalidK(k));
        }
        let dim = g_f.len();
        if let Some(bad) = g_p.iter().find(|g| g.len() != dim) {
            return Err(SmoothingError::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        let mut g_p_bar = vec![0.0; dim];
        if !g_p.is_empty() {
            for g in &g_p {
                for (b, x) in g_p_bar.iter_mut().zip(g) {
                    *b += x;
                }
            }
            let m = g_p.len() as f64;
            g_p_bar.iter_mut().for_each(|b| *b /= m);
        }
        Ok(Self {
            g_f,
            g_p,
            g_p_bar,
            k,
        })
    }

    pub fn g_f(&self) -> &[f64] {
        &self.g_f
    }

    pub fn g_p(&self) -> &[Vec<f64>] {
        &self.g_p
    }

    pub fn g_p_bar(&self) -> &[f64] {
        &self.g_p_bar
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.g_f.len()
    }

    /// Multiplies every vector by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let s = |v: &[f64]| v.iter().map(|x| x * c).collect::<Vec<_>>();
        Self {
            g_f: s(&self.g_f),
            g_p: self.g_p.iter().map(|g| s(g)).collect(),
            g_p_bar: s(&self.g_p_bar),
            k: self.k,
        }
    }
}

/// `u = ḡ_p − (1 − 1/K)·g_f`.
pub fn deflection_vector(b: &GradientBundle) -> Vec<f64> {
    let c = 1.0 - 1.0 / b.k as f64;
    b.g_p_bar
        .iter()
        .zip(&b.g_f)
        .map(|(p, f)| p - c * f)
        .collect()
}

/// `d(r) = −g_f + r·u`.
pub fn update_vector(b: &GradientBundle, r: f64) -> Vec<f64> {
    let u = deflection_vector(b);
    b.g_f.iter().zip(&u).map(|(f, u)| -f + r * u).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateDiagnostics {
    pub r_star: f64,
    /// `<g_f, u>`.
    pub inner: f64,
    /// `‖u‖²`.
    pub u_norm_sq: f64,
    /// `‖d(r*)‖²`.
    pub d_star_norm_sq: f64,
    /// `‖d(0)‖² = ‖g_f‖²`.
    pub d0_norm_sq: f64,
}

/// `r* = <g_f, u> / ‖u‖²`, the minimizer of `‖d(r)‖²`.
pub fn optimal_smoothing_rate(b: &GradientBundle) -> Result<RateDiagnostics, SmoothingError> {
    let u = deflection_vector(b);
    let u_norm_sq = dot(&u, &u);
    if u_norm_sq <= ZERO_TOL {
        return Err(SmoothingError::DegenerateDeflection);
    }
    let inner = dot(&b.g_f, &u);
    let r_star = inner / u_norm_sq;
    let d = update_vector(b, r_star);
    Ok(RateDiagnostics {
        r_star,
        inner,
        u_norm_sq,
        d_star_norm_sq: dot(&d, &d),
        d0_norm_sq: dot(&b.g_f, &b.g_f),
    })
}

/// `∇L_f` with `L_f` the negated cross-entropy on `forget`.
pub fn forget_gradient(
    ckpt: &Checkpoint,
    forget: &SequenceBatch,
) -> Result<Vec<f64>, SmoothingError> {
    let g = sft_loss(ckpt, forget)?.gradient()?;
    Ok(g.into_iter().map(|x| -x).collect())
}

/// `∇L_p`, the cross-entropy gradient on one normal batch.
pub fn normal_gradient(
    ckpt: &Checkpoint,
    normal: &SequenceBatch,
) -> Result<Vec<f64>, SmoothingError> {
    Ok(sft_loss(ckpt, normal)?.gradient()?)
}
