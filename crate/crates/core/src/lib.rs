//! Temporal-frequency state space duality for utterance-level speech
//! emotion recognition.
mod binary;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod ssd;
pub mod tf_block;
pub mod trainer;

pub use error::{Error, Result};
