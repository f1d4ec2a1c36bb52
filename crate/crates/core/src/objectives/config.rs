use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ObjectiveError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sga,
    Ga,
    Gd,
    Kl,
    Po,
    Dpo,
    DpoRt,
    Npo,
    NpoRt,
    Mismatch,
    Llmu,
    Flat,
    TaskVector,
    Whp,
}

impl Method {
    pub const ALL: [Method; 14] = [
        Method::Sga,
        Method::Ga,
        Method::Gd,
        Method::Kl,
        Method::Po,
        Method::Dpo,
        Method::DpoRt,
        Method::Npo,
        Method::NpoRt,
        Method::Mismatch,
        Method::Llmu,
        Method::Flat,
        Method::TaskVector,
        Method::Whp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sga => "SGA",
            Method::Ga => "GA",
            Method::Gd => "GD",
            Method::Kl => "KL",
            Method::Po => "PO",
            Method::Dpo => "DPO",
            Method::DpoRt => "DPO-RT",
            Method::Npo => "NPO",
            Method::NpoRt => "NPO-RT",
            Method::Mismatch => "Mismatch",
            Method::Llmu => "LLMU",
            Method::Flat => "FLAT",
            Method::TaskVector => "TaskVector",
            Method::Whp => "WHP",
        }
    }

    /// Whether the method needs the frozen original model during training.
    pub fn needs_reference(self) -> bool {
        matches!(
            self,
            Method::Kl | Method::Dpo | Method::DpoRt | Method::Llmu
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase() == key || kebab(*m) == key)
            .ok_or_else(|| ObjectiveError::UnknownMethod(s.to_string()))
    }
}

fn kebab(m: Method) -> String {
    serde_json::to_value(m)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Variational/conjugate activation pair `(g*, f*)` of an f-divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    /// Pearson χ²: `g*(t) = 2(t − 1)`, `f*(u) = u²/4 + u`.
    Pearson,
    /// Kullback-Leibler: `g*(t) = 1 + ln t`, `f*(u) = exp(u − 1)`.
    Kl,
    /// `g*(t) = t`, `f*(u) = u`; only useful for testing.
    Identity,
}

impl FromStr for Divergence {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pearson" => Ok(Divergence::Pearson),
            "kl" => Ok(Divergence::Kl),
            "identity" => Ok(Divergence::Identity),
            _ => Err(ObjectiveError::UnknownDivergence(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnMethodConfig {
    pub method: Method,
    /// Retain-regularization weight for GD, KL and the `-RT` variants.
    pub lambda: f64,
    /// Smoothing rate.
    pub r: f64,
    /// Slot count: one forget slot plus `K − 1` normal slots.
    pub k: usize,
    /// Number of normal losses per forget record; `K − 1` when unset.
    pub normals: Option<usize>,
    /// Inverse temperature for DPO and NPO.
    pub beta: f64,
    /// WHP interpolation coefficient.
    pub alpha: f64,
    /// LLMU weights `(ε₁, ε₂, ε₃)`.
    pub epsilon: Option<[f64; 3]>,
    pub divergence: Divergence,
    /// Use the reference-model log-ratio as the DPO margin; zero otherwise.
    pub reference_margin: bool,
}

impl Default for UnlearnMethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Sga,
            lambda: 1.0,
            r: 0.0,
            k: 4,
            normals: None,
            beta: 0.1,
            alpha: 1.0,
            epsilon: None,
            divergence: Divergence::Pearson,
            reference_margin: true,
        }
    }
}

impl UnlearnMethodConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn sga(r: f64, k: usize) -> Self {
        Self {
            r,
            k,
            ..Self::new(Method::Sga)
        }
    }

    /// Normal losses per forget record.
    pub fn normal_count(&self) -> usize {
        self.normals.unwrap_or(self.k.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::InvalidConfig(m));
        if !self.r.is_finite() || !self.lambda.is_finite() || !self.alpha.is_finite() {
            return bad("r, lambda and alpha must be finite".into());
        }
        match self.method {
            Method::Sga if self.k < 2 => Err(ObjectiveError::InvalidK { k: self.k, min: 2 }),
            Method::Dpo | Method::DpoRt | Method::Npo | Method::NpoRt
                if !(self.beta > 0.0 && self.beta.is_finite()) =>
            {
                bad(format!(
                    "beta must be positive for {}, got {}",
                    self.method, self.beta
                ))
            }
            Method::Llmu if self.epsilon.is_none() => Err(ObjectiveError::MissingInput {
                method: "LLMU",
                what: "epsilon weights",
            }),
            _ => Ok(()),
        }
    }
}
