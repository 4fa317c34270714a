pub mod error;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub mod adaptation;
pub mod encoder;
pub mod nn;
pub mod prompt;
pub mod decoder;
pub mod data;
pub mod metrics;
pub mod model;
pub mod training;
pub mod config;
pub mod checkpoint;
pub mod pipeline;
pub mod ablation;
pub mod cli;
