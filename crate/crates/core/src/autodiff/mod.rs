//! Reverse-mode differentiation, finite-difference checking and the
//! momentum optimizer.

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, ParamError};
pub use optim::{sgd_step, OptimizerConfig, OptimizerState};
pub use tape::{AdjointFault, Gradients, ScatterPart, Tape, Var};
