//! Keyframe-based video semantic segmentation with reusable deep common
//! features.
//!
//! A frame is encoded by a shallow stage (`enc_lo`) and a deep stage
//! (`enc_hi`). The deep "common" feature is computed on keyframes only and
//! reused verbatim by neighbouring frames, which run just the shallow stage,
//! a small fusion module and the decoder.

pub mod autograd;
pub mod cli;
pub mod dataio;
pub mod engine;
mod error;
pub mod gradcheck;
pub mod label;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
