pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nets;
pub mod optim;
pub mod selectors;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use tensor::Tensor;
