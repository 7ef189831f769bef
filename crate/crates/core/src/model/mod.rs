//! Stride embedding, masked-reconstruction pre-training and classification.

pub mod checkpoint;
pub mod config;
pub mod mask;
pub mod net;

#[cfg(test)]
mod tests;

pub use checkpoint::{Checkpoint, TensorEntry, CHECKPOINT_MAGIC};
pub use config::{visible_len, ModelConfig, ReconTarget};
pub use mask::{make_mask, MaskPlan};
pub use net::{count_parameters, Mode, NetMamba, PretrainOutput};
