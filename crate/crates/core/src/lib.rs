pub mod attacks;
pub mod autodiff;
mod binio;
pub mod error;
pub mod fedcore;
pub mod fusion;
pub mod gating;
pub mod lora;
pub mod optim;
pub mod privacy;
pub mod seed;
pub mod tensor;
pub mod tinylm;

pub use autodiff::{Gradients, NodeId, Tape};
pub use error::{Error, Result};
pub use lora::{DenseDelta, LowRankAdapter, Role};
pub use tensor::Tensor;
pub use tinylm::{AdapterRef, ModelConfig, TinyLM};
