pub mod cli;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod ingest;
pub mod layers;
pub mod model;
pub mod scoring;
pub mod store;
pub mod tensor;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
