//! Dense `f32` tensors with tape-based reverse-mode differentiation.
//!
//! Only the operations a ViT/ResNet feature extractor and convolutional
//! regression heads need are provided. Heavy lifting goes through
//! the `gemm` crate.

mod error;
mod gemm;
mod graph;
pub mod io;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Conv2dSpec, Gradients, Graph, Var, WEIGHT_SUM_EPS};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
