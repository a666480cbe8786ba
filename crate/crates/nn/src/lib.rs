//! Minimal CPU tensor kernels with tape-based reverse-mode differentiation.
//!
//! Kernels are generic over [`Real`] so the same code runs in `f32` for
//! training and inference and in `f64` for gradient checks.

mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
mod param;
mod real;
mod tensor;

pub use error::{NnError, Result};
pub use graph::{Graph, Mode, NodeGrads, Var};
pub use kernels::{conv2d, layer_norm, linear, masked_softmax, maxpool2d, scaled_dot_attention};
pub use optim::{Adam, AdamConfig};
pub use param::{Gradients, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
