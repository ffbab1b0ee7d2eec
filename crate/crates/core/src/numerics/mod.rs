//! Dense kernels, reverse-mode gradients and the finite-difference oracle.

pub mod gradcheck;
pub mod linalg;
mod matrix;
mod param;
mod rng;
pub mod softmax;
pub mod tape;

pub use gradcheck::{check_gradient, GradCheckReport, FD_STEP};
pub use linalg::solve_linear_system;
pub use matrix::Matrix;
pub use param::Parameter;
pub use rng::{fnv1a64, SeededRng};
pub use softmax::row_softmax;
pub use tape::{value_and_grad, Tape, Var};
