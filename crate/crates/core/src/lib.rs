pub mod analysis;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod minimisation;
pub mod models;
pub mod rng;
pub mod runner;
pub mod unlearning;

pub use error::{Error, Result};
