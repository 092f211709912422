//! Training loops: masked-unit pretraining, separation fine-tuning and
//! relabelling from intermediate layers.

pub mod config;
pub mod data;
pub mod finetune;
pub mod labels;
pub mod log;
pub mod pretrain;
pub mod relabel;
pub mod run;

use pachubert_autodiff::{CheckpointError, GraphError};
use pachubert_core::audio::AudioError;
use pachubert_core::dsp::DspError;
use pachubert_core::formats::FormatError;
use pachubert_core::labels::LabelError;
use pachubert_model::ModelError;
use thiserror::Error;

pub use config::{Stage, StageConfig};
pub use data::{make_validation_split, select_subset, FinetuneSong, SplitSpec};
pub use finetune::{evaluate_l1, run_finetune};
pub use labels::{clip_features, fit_initial_labels};
pub use log::{Record, TrainLog};
pub use pretrain::{evaluate_masked_accuracy, run_pretrain, PretrainExample};
pub use relabel::{collect_latents, run_relabel, RelabelOutcome};
pub use run::{RunOptions, Start, TrainOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    Config(String),
    #[error("labels do not match the model: {0}")]
    LabelMismatch(String),
    #[error("stems do not match the mixture: {0}")]
    StemMismatch(String),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("log: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        Self::Model(e.into())
    }
}

impl From<DspError> for TrainError {
    fn from(e: DspError) -> Self {
        Self::Model(e.into())
    }
}

impl From<FormatError> for TrainError {
    fn from(e: FormatError) -> Self {
        Self::Checkpoint(e.into())
    }
}

impl From<pachubert_autodiff::optim::OptimError> for TrainError {
    fn from(e: pachubert_autodiff::optim::OptimError) -> Self {
        Self::Config(e.to_string())
    }
}
