//! Experiment pipeline: synthetic corpus, finetuning, normal-set
//! construction, unlearning, evaluation, smoothing-rate sweeps and tables.

mod config;
mod corpus;
mod eval;
mod pipeline;
mod sweep;
mod tables;
mod train;


use thiserror::Error;

use crate::lm::ModelError;
use crate::metrics::MetricError;
use crate::normal::NormalError;
use crate::objectives::ObjectiveError;
use crate::smoothing::SmoothingError;

pub use config::{ExperimentConfig, ModelSection, NormalSection, Stage};
pub use corpus::{synth_corpus, Corpus, CorpusSpec, SPLITS};
pub use eval::{
    answer_perplexity, digest_json, evaluate, generation_scores, nll_scores, EvalConfig,
    GenerationScores, RetainedReference,
};
pub use pipeline::{
    build_unlearn_data, evaluate_unlearned, method_label, run_pipeline, run_unlearn, sha256_file,
    Layout, PipelineRun, RunManifest, StageActivity, StageFailure, StageRecord, UnlearnRun,
    UnlearnedModel, Workspace,
};
pub use sweep::{probe_r, sweep_r, ProbeReport, ProbeRow, SweepRow, SweepTable};
pub use tables::{
    baseline_label, best_r, collect_rows, column_direction, export_tables, parse_cell,
    read_report_csv, top2, write_report_csv, Better, TableRow, FLAVORS,
};
pub use train::{
    batches, encode_pair, encode_record, finetune, reinforce, task_vector, training_examples,
    unlearn, DivergenceGuard, EpochLog, Schedule, TrainStats, UnlearnData, UnlearnOutcome,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("missing {0}")]
    MissingData(&'static str),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Normal(#[from] NormalError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
