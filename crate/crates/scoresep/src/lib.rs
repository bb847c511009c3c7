//! Weak-label representation learning for score-informed source separation.
//!
//! A structured-dropout autoencoder learns a parts-based spectral
//! representation from note events (weak labels), and separates arbitrary
//! note groups from a mixture via soft masking. A zero-constrained NMF
//! baseline, projection-based SDR/NSDR metrics and a deterministic additive
//! synthesizer round out the experiment harness.

pub mod autoencoder;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod nmf;
pub mod numerics;
pub mod score;
pub mod separation;
pub mod signal;

pub use error::{Error, Result};
