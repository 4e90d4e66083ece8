//! Physics-informed multi-task pre-training for wearable human activity
//! recognition.

pub mod augment;
pub mod cache;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod par;
pub mod pseudo_labels;
pub mod rng;
pub mod timeseries;

pub use error::{PimError, Result};
