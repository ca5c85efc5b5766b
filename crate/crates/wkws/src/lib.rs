//! Weakly supervised keyword spotting toolkit: synthesize temporally weak
//! training data (spliced or SNR-mixed keywords), train a small temporal
//! convolution network on clip-level labels, and evaluate on clean clips.

pub mod audio_io;
pub mod error;
pub mod eval;
pub mod features;
pub mod manifest;
pub mod model;
pub mod par;
pub mod rng;
pub mod smoke;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
