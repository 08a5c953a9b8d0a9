//! Selective feature connections for convolutional networks.
//!
//! Low-layer feature maps are reweighted by a spatial softmax selector
//! computed from high-layer features before the two are concatenated. The
//! crate contains everything needed to train and probe such models on a CPU:
//! a dense NCHW [`Tensor`], a tape-based autodiff [`Graph`] with a
//! finite-difference checker, the selector block itself ([`sfcm`]), a few
//! conventional layers, dense-block classifiers, synthetic and CIFAR-10 data,
//! and a training loop.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type.

pub mod autograd;
pub mod data;
pub mod error;
pub mod models;
pub mod nn;
pub mod scalar;
pub mod sfcm;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
