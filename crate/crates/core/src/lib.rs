//! Hierarchical photo-scene encoding and attentive decoding for album storytelling.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod gru;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
