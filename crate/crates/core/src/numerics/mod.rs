//! Dense tensors and a single-use reverse-mode gradient tape.
//!
//! Every kernel reduces in a fixed sequential order per output element, so
//! appending rows or columns that contribute exact zeros (masked keys,
//! padding rows, ignored labels) leaves every other value bit-identical.
//! The causality and padding guarantees of the model rest on this.

mod kernels;
mod tape;
mod tensor;

pub use kernels::{gemm_nn, gemm_tn, transpose};
pub use tape::{Tape, Var};
pub(crate) use tape::gelu_value;
pub use tensor::{Scalar, Tensor};

/// Additive surrogate for -inf in attention masks.
pub const MASK_VALUE: f64 = -1e9;

/// Label value excluded from the loss.
pub const IGNORE_INDEX: i64 = -100;
