//! Reverse-mode automatic differentiation over the layer graph of a
//! [`Model`](crate::model::Model).

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, grad_check_real, GradCheckConfig, GradCheckReport};
pub use tape::{per_example_cross_entropy, softmax_cross_entropy, BackwardOptions, Tape};

#[cfg(test)]
mod tests;
