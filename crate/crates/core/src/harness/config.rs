use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::lm::ModelConfig;
use crate::normal::{GeneratorEndpointConfig, NormalMode, DEFAULT_M, DEFAULT_THRESHOLD};
use crate::objectives::{Method, UnlearnMethodConfig};

use super::corpus::CorpusSpec;
use super::eval::{digest_json, EvalConfig};
use super::train::Schedule;
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Finetune,
    Normal,
    Unlearn,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Synth,
        Stage::Finetune,
        Stage::Normal,
        Stage::Unlearn,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Finetune => "finetune",
            Stage::Normal => "normal",
            Stage::Unlearn => "unlearn",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| HarnessError::InvalidConfig(format!("unknown stage '{s}'")))
    }
}

/// Architecture of the trained model; the vocabulary size is the BPE
/// target and the checkpoint records the size actually reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 64,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalSection {
    pub mode: NormalMode,
    /// Companions per forget record.
    pub m: usize,
    pub threshold: f64,
    pub allow_fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<GeneratorEndpointConfig>,
}

impl Default for NormalSection {
    fn default() -> Self {
        Self {
            mode: NormalMode::Similarity,
            m: DEFAULT_M,
            threshold: DEFAULT_THRESHOLD,
            allow_fallback: true,
            endpoint: None,
        }
    }
}

/// Everything one pipeline run depends on. Serialized as TOML; every
/// default is written back into the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output root; not part of the config digest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub stages: Vec<Stage>,
    pub corpus: CorpusSpec,
    pub model: ModelSection,
    pub finetune: Schedule,
    pub normal: NormalSection,
    pub unlearn: UnlearnMethodConfig,
    pub unlearn_schedule: Schedule,
    /// Further finetuning on the forget set for TaskVector and WHP.
    pub reinforce: Schedule,
    /// Smoothing rates for `sweep`.
    pub sweep: Vec<f64>,
    /// Concurrent sweep runs.
    pub jobs: usize,
    pub eval: EvalConfig,
    /// Also evaluate the finetuned and retained checkpoints.
    pub baselines: bool,
    /// Retain perplexity above which an unlearning run is halted.
    pub divergence_ppl: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            stages: Stage::ALL.to_vec(),
            corpus: CorpusSpec::default(),
            model: ModelSection::default(),
            finetune: Schedule {
                epochs: 40,
                lr: 3e-3,
                batch_size: 32,
                decay: true,
            },
            normal: NormalSection::default(),
            unlearn: UnlearnMethodConfig::default(),
            unlearn_schedule: Schedule::default(),
            reinforce: Schedule {
                epochs: 10,
                lr: 1e-3,
                batch_size: 32,
                decay: false,
            },
            sweep: vec![-2.0, -0.8, -0.4, -0.2, 0.0, 0.2, 0.4, 0.8],
            jobs: 1,
            eval: EvalConfig::default(),
            baselines: false,
            divergence_ppl: 1e6,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.corpus.validate()?;
        self.finetune.validate()?;
        self.unlearn_schedule.validate()?;
        self.reinforce.validate()?;
        self.unlearn.validate()?;
        self.model
            .model_config(self.model.vocab_size.max(5), self.seed)
            .validate()?;
        if self.normal.m == 0 {
            return Err(HarnessError::InvalidConfig(
                "normal.m must be at least 1".into(),
            ));
        }
        if !self.normal.threshold.is_finite() {
            return Err(HarnessError::InvalidConfig(
                "normal.threshold must be finite".into(),
            ));
        }
        if self.normal.mode == NormalMode::Endpoint {
            match &self.normal.endpoint {
                Some(e) => e.validate()?,
                None => {
                    return Err(HarnessError::InvalidConfig(
                        "normal.mode = endpoint needs a [normal.endpoint] table".into(),
                    ))
                }
            }
        }
        if self.unlearn.method == Method::Sga && self.unlearn.normal_count() > self.normal.m {
            return Err(HarnessError::InvalidConfig(format!(
                "SGA with K = {} needs {} companions per forget record, normal.m is {}",
                self.unlearn.k,
                self.unlearn.normal_count(),
                self.normal.m
            )));
        }
        if !(self.divergence_ppl > 1.0) {
            return Err(HarnessError::InvalidConfig(format!(
                "divergence_ppl must exceed 1, got {}",
                self.divergence_ppl
            )));
        }
        if self.sweep.iter().any(|r| !r.is_finite()) {
            return Err(HarnessError::InvalidConfig(
                "sweep rates must be finite".into(),
            ));
        }
        if self.jobs == 0 {
            return Err(HarnessError::InvalidConfig(
                "jobs must be at least 1".into(),
            ));
        }
        let mut sorted = self.stages.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.stages.len() {
            return Err(HarnessError::InvalidConfig("duplicate stage".into()));
        }
        Ok(())
    }

    /// The config as recorded in a manifest: no output path.
    pub fn recorded(&self) -> Self {
        Self {
            out_dir: None,
            ..self.clone()
        }
    }

    pub fn digest(&self) -> String {
        digest_json(&self.recorded())
    }

    pub fn wants(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }
}
