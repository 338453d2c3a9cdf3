//! Joint speech-text pre-training for an attention encoder-decoder, at a scale
//! that runs on one CPU core.
//!
//! The crate is organized bottom-up: [`numerics`] provides tensors and
//! reverse-mode differentiation, [`model`] the network and its two encoder
//! wirings, [`tasks`] the four subtask objectives, [`data`] a synthetic
//! phoneme-grounded corpus, [`train`] the three-stage optimization,
//! [`analysis`] the gradient-similarity probe and [`eval`] decoding and
//! metrics. [`config`] ties them together into one run document.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod seeds;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
