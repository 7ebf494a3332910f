pub mod cli;
pub mod error;
pub mod estimate;
pub mod model;
pub mod optimize;
pub mod problems;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
