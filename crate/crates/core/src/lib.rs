pub mod analysis;
pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
