//! Differentiable-operator engine and training stack for the two-stage
//! material decomposition pipeline: tensors, conv/pool/upsample/concat ops
//! with exact reverse-mode gradients, the model builders, Adam, on-the-fly
//! augmentation and the stage training loop with checkpointing.

pub mod augment;
pub mod checkpoint;
pub mod model;
pub mod models;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use model::Model;
pub use tensor::Tensor;
