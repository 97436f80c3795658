//! Complex-Gaussian variational autoencoders built from complex-valued
//! convolutional-recurrent networks, for single-channel speech enhancement.

pub mod error;
pub mod cgauss;
pub mod checks;
pub mod data;
pub mod eval;
pub mod frontend;
pub mod losses;
pub mod models;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
