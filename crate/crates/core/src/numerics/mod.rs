//! Minimal dense-tensor arithmetic with explicit forward/backward pairs,
//! a deterministic RNG, and a finite-difference oracle.

mod fd;
mod rng;
mod tensor;

pub use fd::{finite_difference_grad, max_rel_error};
pub use rng::RngState;
pub use tensor::{
    batched_matmul, l2_normalize_rows, l2_normalize_rows_backward, layer_norm_rows,
    layer_norm_rows_backward, matmul, matmul_backward, matmul_transpose_a, matmul_transpose_b,
    relu, relu_backward, softmax_rows, softmax_rows_backward, Parameter, Tensor, ROW_NORM_EPS,
};
