//! Evaluation metrics: text overlap, the fictitious-author benchmark
//! scores, and memorization and membership-inference scores.

mod muse;
mod report;
mod text;
mod tofu;


use thiserror::Error;

use crate::lm::ModelError;

pub use muse::{
    generate_answers, knowmem, knowmem_from_answers, mia_auc, privleak, utility_preservation,
    verbmem, RocCurve, DEFAULT_PREFIX_LEN,
};
pub use report::{MetricReport, CSV_HEADER};
pub use text::{bleu, lcs_len, rouge_l, tokenize, RougeL};
pub use tofu::{
    answer_probability_ratio, forget_quality, fq_gap, kolmogorov_q, ks_statistic, ks_test,
    model_utility, truth_ratio, truth_score, KsTest,
};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty {0}")]
    EmptySample(&'static str),
    #[error("zero {0}")]
    ZeroDenominator(&'static str),
    #[error("score {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}
