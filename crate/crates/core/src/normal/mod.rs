//! Normal-data construction: for each forget record, `M` companion records
//! drawn from similar retain data, from an external generator, or from
//! fixed refusals.

mod build;
mod embed;
mod endpoint;
mod record;
mod select;
mod set;

#[cfg(test)]
mod tests;

use thiserror::Error;

use crate::lm::ModelError;

pub(crate) use build::bounded_map;
pub use build::{
    build_normal_set, NormalBuild, NormalMode, NormalSource, DEFAULT_M, DEFAULT_THRESHOLD,
};
pub use embed::{
    embed, Embedding, EmbeddingProvider, HashedNgram, ModelEmbedding, DEFAULT_BUCKETS,
};
pub use endpoint::{
    generate_via_endpoint, FailingTransport, FixtureTransport, Generated, GeneratorEndpointConfig,
    HttpTransport, PromptTemplate, Substitution, Transport, TransportError,
};
pub use record::{read_corpus, validate_corpus, write_corpus, QARecord};
pub use select::{select_similar_retain, SimilarityIndex};
pub use set::{fallback_safe_response, Companion, NormalEntry, NormalSet, Provenance, REFUSALS};

#[derive(Debug, Error)]
pub enum NormalError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("text has no embeddable features")]
    ZeroEmbedding,
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("record {0} has an empty question or answer")]
    InvalidRecord(String),
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error(
        "only {found} of {wanted} retain records qualify for {forget_id} and fallback is disabled"
    )]
    Shortfall {
        forget_id: String,
        found: usize,
        wanted: usize,
    },
    #[error("invalid normal-set config: {0}")]
    InvalidConfig(String),
    #[error("credential variable {0} is not set")]
    MissingCredential(String),
    #[error("malformed endpoint response: {0}")]
    MalformedResponse(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
