//! Minimal differentiable building blocks with hand-written backward passes.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod heads;
pub mod linear;
pub mod lstm;
pub mod tensor;

pub use adam::{Adam, AdamConfig, StepSchedule, WeightDecay};
pub use checkpoint::{Checkpoint, Precision};
pub use conv::{AffineNorm, BasicBlock, Conv2d, Encoder, EncoderConfig};
pub use heads::{AttentionHead, FcActivationHead};
pub use linear::Linear;
pub use lstm::Lstm;
pub use tensor::{DiffModule, Module, Param, Tensor};
