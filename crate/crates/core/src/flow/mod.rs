//! Invertible flow steps conditioned on a context vector and a class id.
//!
//! Rows are independent samples. The normalizing direction (`forward`) maps
//! data to latent and reports `log|det ∂z/∂x|` per row; `inverse` undoes it
//! exactly under the same context and class.

mod actnorm;
mod coupling;
mod invlinear;
mod stack;

pub use actnorm::ActNorm;
pub use coupling::Coupling;
pub use invlinear::InvLinear;
pub use stack::{FlowConfig, FlowStack, FlowStep, LinearInit};

use crate::error::{Error, Result};

pub(crate) fn check_classes(classes: &[usize], count: usize) -> Result<()> {
    match classes.iter().find(|&&c| c >= count) {
        Some(c) => Err(Error::argument(format!(
            "class {c} out of range for {count} classes"
        ))),
        None => Ok(()),
    }
}
