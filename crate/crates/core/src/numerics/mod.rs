//! Dense matrices, forward kernels and reverse-mode differentiation.

mod finite_diff;
mod matrix;
mod ops;
mod tape;

pub use finite_diff::{central_difference, max_relative_error, RelativeError, RELATIVE_ERROR_FLOOR};
pub use matrix::Matrix;
pub use ops::{argmax, cosine_similarity_matrix, gather, l2_normalize_rows, matmul, row_softmax, topk_indices};
pub use tape::{GradRecord, ParamId, Tape, Var};

pub(crate) use tape::kl_row;
