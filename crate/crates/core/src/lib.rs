//! Additive quantile mixed models for clustered data.
//!
//! Smooth terms are penalized splines written as random effects, cluster effects
//! are correlated Gaussian random effects, and the check loss is replaced by a
//! C¹ smoothing whose band shrinks along a schedule while a Laplace-approximated
//! quasi-likelihood is maximized.

pub mod basis;
pub mod bootstrap;
pub mod cli;
pub mod estimate;
pub mod error;
pub mod loss;
pub mod model;
pub mod optim;
pub mod sim;

pub use error::{AqmmError, Result};
