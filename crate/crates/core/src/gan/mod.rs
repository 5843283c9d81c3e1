//! Generator stages and per-resolution discriminators.

pub mod discriminator;
pub mod generator;
pub mod spectral;

pub use discriminator::Discriminator;
pub use generator::{Generator, StageOutput};
pub use spectral::{spectral_normalize, SpectralNormState};
