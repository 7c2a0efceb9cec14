//! Context-conditioned normalizing flows over facial motion coefficients.
//!
//! The crate is generic over the floating point type through [`Scalar`]; the
//! aliases below fix it to `f64`, which is what training and the acceptance
//! checks use.

pub mod context;
pub mod error;
pub mod flow;
pub mod generators;
pub mod latent;
pub mod nn;
pub mod numerics;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ParamSet64 = numerics::ParamSet<f64>;
pub type Tape64 = numerics::Tape<f64>;
