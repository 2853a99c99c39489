//! Discrepant child-parent architecture search for 1-bit convolutional networks.

pub mod autodiff;
pub mod binarize;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoupled;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod retrain;
pub mod search;
pub mod space;
pub mod supernet;
pub mod tangent;
pub mod tensor;
pub mod xnor;

pub use error::{Error, Result};
pub use tensor::Tensor;
