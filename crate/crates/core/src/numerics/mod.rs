//! Dense `f64` matrices, a reverse-mode tape for the loss primitives, and a
//! central-difference gradient checker.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, CheckReport, CoordinateCheck, ParamSet, REL_ERR_FLOOR};
pub use matrix::{
    dot, l2_normalize_rows, matmul, matmul_transposed, norm, sigmoid, softmax, softmax_rows, DenseMatrix,
    NORM_EPS,
};
pub use tape::{kl_row_mean, GradTape, Gradients, ParamId, Var, LOG_FLOOR};
