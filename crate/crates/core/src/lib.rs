//! Borrowing-factor decomposition of linear-Gaussian hierarchical models.

pub mod covariance;
pub mod decompose;
pub mod error;
pub mod glmm;
pub mod influence;
pub mod io;
pub mod model;
mod optim;
pub mod oracles;
mod par;
pub mod partition;
pub mod pipeline;
pub mod reml;
pub mod synth;

pub use error::{Error, Result};
pub use par::parallel_available;
