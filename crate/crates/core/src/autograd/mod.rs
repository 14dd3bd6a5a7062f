//! Reverse-mode automatic differentiation over dense row-major tensors.

pub mod ops;
mod scalar;
mod tensor;

pub use ops::{
    add, add_bias, attention, block_diag_linear, cross_entropy_masked, cross_entropy_weighted, layer_norm, linear,
    matmul, mean, mul, scale, scatter_add_rows, select_rows, silu, silu_gate, sum,
};
pub use scalar::Scalar;
pub use tensor::{no_grad, Tensor};
