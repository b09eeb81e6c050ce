//! Data-free convolutional generators for the inviscid Burgers' equation,
//! trained with a deterministic data-parallel engine.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod config;
pub mod distributed;
pub mod error;
pub mod exact;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod pde_loss;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
