//! A small causal transformer language model trained on the autodiff tape.

mod batch;
mod checkpoint;
mod config;
mod infer;
mod model;
mod train;
mod vocab;


use thiserror::Error;

use crate::autodiff::TensorError;

pub use batch::{Example, SequenceBatch};
pub use checkpoint::{
    param_count, param_layout, AdamMoments, Checkpoint, ParamSpec, Provenance, FORMAT_VERSION,
    MAGIC,
};
pub use config::ModelConfig;
pub use infer::{
    answer_logits, generate, generate_greedy_batch, mean_hidden_state, next_token_logits,
    perplexity, score_batch, score_sequence, supervised_log_probs, supervised_logits,
    token_probability_report, total_nll, DecodeMode, LanguageModel, SequenceScore, TokenProbRow,
};
pub use model::{
    hidden_states, logits_at, mean_cross_entropy, target_log_probs, ParamVars, TargetLogProbs,
};
pub use train::{descend, sft_loss, train_step, AdamW, LossGraph};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter vector has {got} values, config implies {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("batch has no supervised positions")]
    NoSupervisedPositions,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("context of {len} tokens exceeds the maximum of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("empty answer")]
    EmptyAnswer,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid learning rate {0}")]
    InvalidLearningRate(f64),
    #[error("invalid temperature {0}")]
    InvalidTemperature(f64),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
