//! Micro transformer with the four pre-training heads, its optimizer,
//! checkpoints and a finite-difference gradient check.

pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tensor;

pub use encoder::{softmax, Batch, HeadLogits, LossBreakdown, Model, ModelError};
pub use optim::{train_step, AdamW, OptimizerConfig};
pub use params::{BlockInfo, ModelConfig, ModelParams};
pub use tensor::{Mat, Real};
