//! Dense-matrix primitives, layer ops with analytic backward passes, and the
//! finite-difference gradient oracle.

pub mod gradcheck;
pub mod matrix;
pub mod ops;

pub use gradcheck::{finite_diff_gradcheck, GradcheckConfig, GradcheckReport};
pub use matrix::{matmul, matmul_at, matmul_bt, Matrix, Real};
pub use ops::{
    layer_norm, layer_norm_backward, masked_mean_pool, masked_mean_pool_backward, softmax_rows,
    softmax_rows_backward, Activation, LayerNormCache, ParamSet, ParamTensor, DEFAULT_LN_EPS,
};
