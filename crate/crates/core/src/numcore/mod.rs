//! Minimal dense numeric layer with reverse-mode gradients.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, NORM_EPSILON};
pub use tensor::{matmul, matmul_nt, matmul_tn, Scalar, Tensor2};
