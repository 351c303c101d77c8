//! Attack, analyze, and defend a small two-stream RGB-D fusion classifier.
//!
//! The crate is a self-contained testbed for patch-style evasion attacks on
//! object recognition models that fuse a color stream with a colorized depth
//! stream. It ships its own reverse-mode tensor core, a synthetic RGB-D
//! dataset, the fusion network, projected-gradient attacks (including one
//! aware of the defense), representation-similarity analysis, a rejection
//! defense calibrated on training data, and an evaluation harness that turns
//! all of it into security curves.
//!
//! Everything is deterministic under a single seed: dataset generation,
//! weight initialization, training order, attack starts, and evaluation all
//! draw from counter-derived streams of one root seed, so any artifact can
//! be regenerated byte for byte.

pub mod attack;
pub mod cka;
pub mod cli;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod harness;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
