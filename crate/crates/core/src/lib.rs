pub mod analysis;
pub mod cli;
pub mod codec;
pub mod config;
pub mod controller;
pub mod error;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
