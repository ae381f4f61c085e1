pub mod augment;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod resample;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
