//! Trainable orderless pooling encoders over a small reverse-mode autodiff
//! core.

pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod heads;
pub mod invert;
pub mod io;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, NodeId};
pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::{ElementwiseOp, ReduceMode, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
