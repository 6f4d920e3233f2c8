pub mod analysis;
pub mod env;
pub mod error;
pub mod experiment;
pub mod knn;
pub mod learn;
pub mod logistic;
pub mod marginal;
pub mod math;
pub mod nuisance;
pub mod rng;
pub(crate) mod serde_float;

pub use error::{Error, Result};
