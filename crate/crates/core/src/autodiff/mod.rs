//! Dense f64 tensors with reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul_raw, softmax_slice, transpose_raw, Tensor};
