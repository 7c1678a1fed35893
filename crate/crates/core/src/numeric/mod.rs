//! Dense `f64` tensors, a reverse-mode tape and a central-difference checker.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use ops::LAYER_NORM_EPS;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine_matrix, sigmoid, softmax_rows, topk_indices, Tensor, COSINE_DELTA};
