//! Reverse-mode autodiff over dense row-major tensors, with the layers,
//! optimisers, schedules and checkpoint format the separation model uses.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod par;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use graph::{CustomOp, Gradients, Graph, GraphError, Var};
pub use ops::{BatchStats, BnMode};
pub use optim::{Adam, AdamConfig, LrSchedule, StepOutcome};
pub use params::{Binding, ParamStore};
pub use tensor::{Float, Tensor};
