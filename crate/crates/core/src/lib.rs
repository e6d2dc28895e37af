//! Decoding images from 1D brain-signal vectors in two stages: a masked
//! signal model learns a voxel representation, then a small latent
//! diffusion model generates images conditioned on that representation.

pub mod codec;
pub mod cond;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod graph;
pub mod gradcheck;
pub mod mbm;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod train;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
