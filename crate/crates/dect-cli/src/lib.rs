//! Pipelines tying the simulation, reconstruction, decomposition and
//! training crates into the dataset-generation / train / decompose /
//! evaluate workflow behind the `dect` binary.

pub mod config;
pub mod dataset;
pub mod pipeline;
