//! STRIC: a stacked-residual causal time-series predictor with a
//! non-parametric CUMSUM anomaly detector on its prediction residuals.
//!
//! The predictor is a cascade of causal blocks, each modeling and removing
//! one structural component of the signal: trend (causal Hodrick-Prescott
//! filters), seasonality (unit-circle cosine filters), stationary linear
//! structure (damped cosine filters), and finally a dilated causal
//! temporal convolution network for whatever non-linear structure is left.
//! Training minimizes a marginal-likelihood upper bound whose fading-memory
//! prior learns how much of the past actually matters.
//!
//! Detection feeds one-step prediction residuals to a CUMSUM built on a
//! closed-form kernel likelihood-ratio estimator, so no residual densities
//! ever need to be estimated.

pub mod autodiff;
pub mod detector;
pub mod error;
pub mod eval;
pub mod ldl;
pub mod linalg;
pub mod model;
pub mod series;
pub mod tcn;
pub mod train;

pub use error::{Result, StricError};
pub use model::{load_checkpoint, save_checkpoint, ModelConfig, StricModel};
pub use series::{TimeSeries, WindowSpec};
