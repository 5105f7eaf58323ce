//! Reverse-mode automatic differentiation over a fixed set of rank-4 ops.

pub mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, grad_check_sampled, rel_error, GradCheckReport};
pub use tape::{log_softmax_channels, Aggregation, Axis, Gradients, PoolMode, Tape, Var};

#[cfg(test)]
pub(crate) use kernels::sigmoid;
