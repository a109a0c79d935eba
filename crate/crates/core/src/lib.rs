pub mod autodiff;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod objectives;
pub mod persistence;
pub mod policy;
pub mod seed;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
