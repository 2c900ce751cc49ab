//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Supplies exactly the primitive set a CST-former style network needs:
//! same-padded and depthwise convolutions, linear maps, batch and layer
//! normalization, activations, pooling, patch unfold/fold, softmax, and a
//! few reductions. Every primitive output is checked for NaN/Inf.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod ops;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Mode, NormStats, Var};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
