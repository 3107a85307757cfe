//! Learned components: a toy text encoder, the scene-graph conditioner, a
//! pixel-space diffusion generator and a small two-stage SGG model.
//!
//! Everything runs on the CPU through candle. Parameters are created from a
//! seeded RNG so two runs with the same seed are bit-identical.

pub mod conditioner;
pub mod diffusion;
pub mod error;
pub mod nn;
pub mod params;
pub mod sgg;
pub mod text;

pub use error::ModelError;

pub type Result<T> = std::result::Result<T, ModelError>;
