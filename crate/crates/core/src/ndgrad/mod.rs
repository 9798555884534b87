//! Dense `f32` arrays with tape-based reverse-mode differentiation.
//!
//! Only the operations the recognizer and the distillation losses need are
//! provided: matmul, conv2d, softmax / log-softmax, elementwise arithmetic,
//! exp / log / sqrt, SiLU, row standardization (mean/std pooling), sums,
//! broadcasting by `expand`, permutes, row gathers and concatenation.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{analytic_grad, grad_check};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
