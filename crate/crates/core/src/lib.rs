pub mod ablation;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcam;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
