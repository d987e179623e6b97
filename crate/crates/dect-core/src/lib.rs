//! Dual-energy fan-beam CT toolkit: phantom generation, polyenergetic
//! transmission simulation, projection operators, filtered back-projection,
//! analytical multi-material decomposition, and the image metrics used to
//! evaluate decompositions.

pub mod arrayfile;
pub mod decomp;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod render;
pub mod spectral;

pub use error::{Error, Result};
