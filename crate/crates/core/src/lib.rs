pub mod cli;
mod error;
pub mod gz2;
pub mod metrics;
pub mod nn;
pub mod scaling;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
