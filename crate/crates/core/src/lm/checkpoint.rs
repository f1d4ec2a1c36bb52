//! Flat parameter vector, canonical layout, and the on-disk container.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! "ULAB" | version u32 | vocab u32 | d_model u32 | n_layers u32 | n_heads u32
//! | max_seq_len u32 | seed u64 | step u64 | provenance u8 | has_moments u8
//! | n_params u64 | theta f64 * n | [m f64 * n | v f64 * n]
//! ```

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};

pub const MAGIC: &[u8; 4] = b"ULAB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Finetuned,
    Retained,
    Unlearned,
}

impl Provenance {
    fn code(self) -> u8 {
        match self {
            Self::Original => 0,
            Self::Finetuned => 1,
            Self::Retained => 2,
            Self::Unlearned => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Self::Original,
            1 => Self::Finetuned,
            2 => Self::Retained,
            3 => Self::Unlearned,
            _ => return None,
        })
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Original => "original",
            Self::Finetuned => "finetuned",
            Self::Retained => "retained",
            Self::Unlearned => "unlearned",
        };
        f.write_str(s)
    }
}

/// Role of one parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

pub const PER_LAYER: usize = 12;

/// Canonical parameter order: `wte, wpe`, then per layer
/// `ln1.g, ln1.b, attn.w_qkv, attn.b_qkv, attn.w_o, attn.b_o, ln2.g, ln2.b,
/// mlp.w_fc, mlp.b_fc, mlp.w_proj, mlp.b_proj`, then `ln_f.g, ln_f.b`.
/// Gradients are flattened in the same order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (v, d, t) = (cfg.vocab_size, cfg.d_model, cfg.max_seq_len);
    let mut shapes: Vec<(String, Vec<usize>)> =
        vec![("wte".into(), vec![v, d]), ("wpe".into(), vec![t, d])];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("h{l}.{s}");
        shapes.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.w_qkv"), vec![d, 3 * d]),
            (p("attn.b_qkv"), vec![3 * d]),
            (p("attn.w_o"), vec![d, d]),
            (p("attn.b_o"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.w_fc"), vec![d, 4 * d]),
            (p("mlp.b_fc"), vec![4 * d]),
            (p("mlp.w_proj"), vec![4 * d, d]),
            (p("mlp.b_proj"), vec![d]),
        ]);
    }
    shapes.push(("ln_f.g".into(), vec![d]));
    shapes.push(("ln_f.b".into(), vec![d]));
    let mut offset = 0;
    shapes
        .into_iter()
        .map(|(name, shape)| {
            let spec = ParamSpec {
                name,
                shape,
                offset,
            };
            offset += spec.len();
            spec
        })
        .collect()
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    param_layout(cfg).iter().map(ParamSpec::len).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Model parameters plus training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub theta: Vec<f64>,
    pub step: u64,
    pub moments: Option<AdamMoments>,
    pub provenance: Provenance,
}

impl Checkpoint {
    /// Fresh model: N(0, 0.02) weights, residual projections scaled by
    /// 1/sqrt(2·n_layers), zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        Self::init_with_std(config, 0.02)
    }

    pub fn init_with_std(config: ModelConfig, std: f64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = param_layout(&config);
        let n = layout.iter().map(ParamSpec::len).sum();
        let mut theta = vec![0.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        for spec in &layout {
            let kind = spec.name.rsplit('.').next().unwrap_or("");
            let slice = &mut theta[spec.range()];
            match kind {
                "g" => slice.iter_mut().for_each(|x| *x = 1.0),
                "b" | "b_qkv" | "b_o" | "b_fc" | "b_proj" => {}
                _ => {
                    let s = if kind == "w_o" || kind == "w_proj" {
                        resid_std
                    } else {
                        std
                    };
                    let dist = Normal::new(0.0, s)
                        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
                    slice.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
                }
            }
        }
        Ok(Self {
            config,
            theta,
            step: 0,
            moments: None,
            provenance: Provenance::Original,
        })
    }

    /// All-zero parameters: every position predicts the uniform distribution.
    pub fn uniform(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let n = param_count(&config);
        Ok(Self {
            config,
            theta: vec![0.0; n],
            step: 0,
            moments: None,
            provenance: Provenance::Original,
        })
    }

    pub fn from_theta(
        config: ModelConfig,
        theta: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = param_count(&config);
        if theta.len() != expected {
            return Err(ModelError::ParamCount {
                expected,
                got: theta.len(),
            });
        }
        Ok(Self {
            config,
            theta,
            step: 0,
            moments: None,
            provenance,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let expected = param_count(&self.config);
        if self.theta.len() != expected {
            return Err(ModelError::ParamCount {
                expected,
                got: self.theta.len(),
            });
        }
        if let Some(m) = &self.moments {
            if m.m.len() != expected || m.v.len() != expected {
                return Err(ModelError::Format(
                    "optimizer moments do not match theta length".into(),
                ));
            }
        }
        Ok(())
    }

    /// Same weights, fresh optimizer state, new provenance.
    pub fn derive(&self, provenance: Provenance) -> Self {
        Self {
            config: self.config.clone(),
            theta: self.theta.clone(),
            step: 0,
            moments: None,
            provenance,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let n = self.theta.len();
        let extra = if self.moments.is_some() { 3 } else { 1 };
        let mut out = Vec::with_capacity(64 + 8 * n * extra);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [
            c.vocab_size,
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.max_seq_len,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.push(self.provenance.code());
        out.push(self.moments.is_some() as u8);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        let mut put = |xs: &[f64]| {
            xs.iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
        };
        put(&self.theta);
        if let Some(m) = &self.moments {
            put(&m.m);
            put(&m.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ModelError::Format("bad magic bytes, expected ULAB".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let config = ModelConfig {
            vocab_size: r.u32()? as usize,
            d_model: r.u32()? as usize,
            n_layers: r.u32()? as usize,
            n_heads: r.u32()? as usize,
            max_seq_len: r.u32()? as usize,
            seed: r.u64()?,
        };
        let step = r.u64()?;
        let prov = r.take(1)?[0];
        let provenance = Provenance::from_code(prov)
            .ok_or_else(|| ModelError::Format(format!("unknown provenance code {prov}")))?;
        let has_moments = r.take(1)?[0] == 1;
        let n = r.u64()? as usize;
        let theta = r.f64s(n)?;
        let moments = if has_moments {
            Some(AdamMoments {
                m: r.f64s(n)?,
                v: r.f64s(n)?,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(ModelError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let ck = Self {
            config,
            theta,
            step,
            moments,
            provenance,
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| ModelError::Format("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
