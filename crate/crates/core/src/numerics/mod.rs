//! Shaped arrays, reverse-mode differentiation and the optimizer.

mod adam;
mod gradcheck;
pub mod special;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckOptions, GradCheckReport};
pub use tape::{logsumexp_slice, FusedOp, Tape, Unary, Var};
pub use tensor::Tensor;
