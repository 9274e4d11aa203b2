//! Multi-illuminant color constancy with a multi-task transformer U-Net.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
