//! Dense tensor math with explicit forward/backward passes, Adam, and gradient checking.

pub mod adam;
pub mod bundle;
pub mod gradcheck;
pub mod ops;
pub mod tensor;

pub use adam::{adam_step, AdamState, ParamTensor};
pub use gradcheck::{finite_difference_check, max_relative_error, numeric_gradient};
pub use ops::{
    layer_norm, layer_norm_backward, l2_normalize, l2_normalize_backward, matmul,
    matmul_backward, softmax_rows, softmax_rows_backward, LayerNormCache,
};
pub use tensor::{Real, Tensor};
