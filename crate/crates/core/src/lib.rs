pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
