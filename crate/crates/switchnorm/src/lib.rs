//! Switchable normalization on dense 4D feature maps.
//!
//! The crate implements a normalization layer that mixes instance,
//! layer, and batch statistics through learned softmax weights, with
//! exact hand-derived forward and backward passes. Around the layer it
//! provides the plain normalizers it degenerates to, a statistics
//! module with a single-pass reuse formulation, inference-time
//! calibration (batch average and moving average), numeric
//! verification tools, and a small self-contained training harness
//! used to study how the learned weights react to minibatch size.
//!
//! Everything is `f64` and deterministic: a fixed seed reproduces the
//! same bytes in every output, with or without the `parallel` feature
//! (rayon is only ever applied across independent output elements).

pub mod analysis;
pub mod error;
mod exec;
pub mod harness;
pub mod normalizers;
pub mod snlayer;
pub mod stats;
pub mod tensor;

pub use error::{Result, SnError};
pub use tensor::{Rng, Tensor4};
