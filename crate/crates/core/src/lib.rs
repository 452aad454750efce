//! Gaussian-process functional priors for Bayesian neural networks.

pub mod bnn;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod gp;
pub mod optim;
pub mod pipeline;
pub mod priors;
pub mod sghmc;
pub mod tuner;

pub use error::{Error, Result};
