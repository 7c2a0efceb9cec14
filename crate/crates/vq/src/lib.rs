//! Vector-quantized patch autoencoder and the code-predicting image
//! generator built on top of it.
//!
//! Images are pixel-row matrices: one row per pixel ordered `(batch, y, x)`,
//! one column per RGB channel, values in `[0, 1]`.

pub mod autoencoder;
pub mod codebook;
pub mod conv;
pub mod patches;
pub mod train;
pub mod vqig;

pub use autoencoder::{AeConfig, PatchAutoencoder};
pub use vqig::{VqigConfig, VqigModel};

pub type PatchAutoencoder64 = PatchAutoencoder<f64>;
pub type VqigModel64 = VqigModel<f64>;
