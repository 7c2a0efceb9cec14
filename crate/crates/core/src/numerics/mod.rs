//! Differentiation, optimization, finite-difference oracles and the
//! constrained least-squares solver shared by the model code.

mod adam;
mod bind;
mod fd;
pub mod linalg;
mod lsq;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use bind::Bound;
pub use fd::{
    finite_diff_grad, grad_check, grad_check_against, rel_err, GradCheckEntry, GradCheckReport,
};
pub use lsq::{constrained_lsq_weights, reconstruct, DEFAULT_RIDGE};
pub use params::{ParamEntry, ParamSet};
pub use tape::{Grads, Tape, Var, PAD};
