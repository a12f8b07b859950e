//! Keyword-guided prompting for a small encoder-decoder speech recognizer.
pub mod audio;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod promptgen;
pub mod rng;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
