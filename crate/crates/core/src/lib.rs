pub mod analysis;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod mem_estimator;
pub mod model;
pub mod optim;
pub mod sl_layer;

pub use error::{Error, Result};
