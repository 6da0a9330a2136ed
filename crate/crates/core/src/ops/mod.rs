//! Layer primitives with forward and hand-written backward passes.

pub mod batchnorm;
pub mod conv;
pub mod init;
pub mod matmul;
pub mod pool;

pub use batchnorm::{batchnorm_backward, batchnorm_forward, BnCache, Phase, RunningStats};
pub use conv::{conv2d_backward, conv2d_backward_with, conv2d_forward, ConvGeometry};
pub use init::kaiming_uniform;
pub use matmul::{linear_backward, linear_forward, matmul};
pub use pool::{maxpool2d, maxpool2d_backward, ArgmaxMap};
