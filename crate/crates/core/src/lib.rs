//! Semi-supervised learning with contrastive pretraining, projection-head
//! fine-tuning and teacher-student distillation, on a small reverse-mode
//! autodiff engine.

pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Graph, Scalar, Tensor, Var};
