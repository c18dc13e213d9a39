//! Dense matrices, a reverse-mode tape, finite-difference checking and
//! seeded randomness.

pub mod gradcheck;
mod matrix;
pub mod rng;
mod tape;

pub use gradcheck::{check_tape_function, grad_check, GradCheckOptions, GradCheckReport};
pub use matrix::Matrix;
pub use tape::{gelu, log_softmax_rows, softmax_rows, CustomOp, Gradients, Tape, Var, LAYER_NORM_EPS};
