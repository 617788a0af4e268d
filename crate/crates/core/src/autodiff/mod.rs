//! Minimal reverse-mode automatic differentiation over `f64` tensors.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_coords, relative_error, GradCheckReport};
pub use tape::{ActivationKind, BatchStats, BinaryKind, Gradients, Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
