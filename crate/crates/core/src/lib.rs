//! Segmentation harness for comparing domain-generalization training
//! strategies across two tasks with held-out domains.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod rng;
pub mod strategies;
pub mod synth;
pub mod train;
pub mod types;

pub use error::{Error, ErrorKind, Result};
