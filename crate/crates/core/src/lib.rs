pub mod acoustics;
pub mod dsp;
pub mod model;
pub mod perturb;
pub mod pipeline;
pub mod provenance;
pub mod relevancy;
pub mod error;
pub mod stats;
pub mod synthcorpus;

pub use error::{Error, Result};
