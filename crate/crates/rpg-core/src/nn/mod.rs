//! Minimal explicit-backprop stack: tensor, convolution, batch norm, dense,
//! pooling, activation, and loss. Enough to assemble small residual
//! networks whose kernels come from parameter rings.

pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod ops;
pub mod tensor;

pub use batchnorm::{BatchNorm, BnCache};
pub use tensor::Tensor;
