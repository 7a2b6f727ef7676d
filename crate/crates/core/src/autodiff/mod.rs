//! Reverse-mode automatic differentiation over a fixed kernel set.

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{check_op, gradient_check, GradCheckReport};
pub use tape::{Gradients, OpKind, Tape, Var, INSTANCE_NORM_EPS, LEAKY_SLOPE, UNIT_NORM_EPS};
