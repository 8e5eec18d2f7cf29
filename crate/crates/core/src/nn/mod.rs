//! Minimal dense neural-network engine: forward pass, exact backpropagation,
//! losses, SGD updates, and parameter-space utilities.

mod loss;
mod matrix;
mod model;

pub use loss::{
    backward, backward_into, cross_entropy, logit_mse, softmax, softmax_into, LossKind, LossSpec,
    LossTargets,
};
pub use matrix::{gemm_into, matmul, DenseMatrix};
pub use model::{DenseLayer, DenseModel, ForwardCache, GradientBundle};
