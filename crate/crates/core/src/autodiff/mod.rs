//! Minimal reverse-mode differentiation over dense tensors.
//!
//! Covers exactly the operations the generator MLP and the strided
//! convolutional critic need: affine maps, channels-last convolution via
//! patch extraction, (leaky) ReLU, sigmoid, square roots, sums and column
//! plumbing. Backward passes are recorded as graph operations, which gives
//! exact second derivatives for the critic's gradient penalty.

mod conv;
mod graph;
mod real;
mod tensor;

pub use conv::{ConvGeometry, ConvPlan};
pub use graph::{CustomOp, Graph, Var};
pub use real::{matmul, Real};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;
