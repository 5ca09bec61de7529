//! Reverse-mode automatic differentiation over dense double-precision
//! tensors, with exactly the operators a sliced-BEV ConvGRU regressor needs:
//! 2-D convolution, group normalization, gated pointwise ops, and a
//! differentiable smallest-eigenvector layer for homogeneous least squares.

pub mod checkpoint;
pub mod eigen;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{AutogradError, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
