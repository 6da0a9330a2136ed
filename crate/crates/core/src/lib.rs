//! One-time-step spiking neural networks trained with a Hoyer regularizer and
//! Hoyer-extremum spike thresholds.
//!
//! Every numeric routine is generic over [`Scalar`] (`f32` or `f64`);
//! training runs in `f32` and the finite-difference oracles in `f64`.

pub mod checkpoint;
pub mod data;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod hoyer;
pub mod network;
pub mod ops;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod scalar;
pub mod spike;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use ops::batchnorm::Phase;
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = network::NetworkModel<f32>;
pub type Model64 = network::NetworkModel<f64>;
