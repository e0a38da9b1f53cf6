//! Collaborative adversarial domain adaptation for optic disc and cup
//! segmentation, at desk scale.

pub mod adapt;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod seeds;
pub mod segnet;
pub mod synth;

pub use error::{Error, Result};
