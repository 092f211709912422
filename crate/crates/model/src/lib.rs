//! The separation network: 2-D conv encoder, transformer bottleneck with
//! span masking, masked-unit prediction head and mask decoder.

pub mod config;
pub mod istft_op;
pub mod masking;
pub mod network;
pub mod separate;

use pachubert_autodiff::GraphError;
use pachubert_core::audio::AudioError;
use pachubert_core::dsp::DspError;
use thiserror::Error;

pub use config::ModelConfig;
pub use masking::{make_mask_plan, make_mask_plan_with, MaskPlan};
pub use network::{init_params, update_running_stats, BottleneckOut, Net};
pub use separate::{apply_masks, separate, separate_clips, separation_forward, stem_l1, synthesis_plan};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    Config(String),
    #[error("masking: {0}")]
    Mask(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty mask: the loss needs at least one masked token")]
    EmptyMask,
    #[error("label {label} outside 0..{classes}")]
    LabelRange { label: usize, classes: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}
