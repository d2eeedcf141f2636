//! Learned resampling for adapting forecasters to predictable concept drift.
//!
//! A resampler maps distribution-similarity features of a training window
//! to per-sample probabilities. It is trained by differentiating through a
//! closed-form weighted linear regression fit on the resampled window, so
//! that the fit predicts the following test window well.

pub mod baselines;
pub mod divergence;
pub mod downstream;
pub mod drift;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod proxy;
pub mod resampler;
pub mod stream;
pub mod trainer;

pub use error::{Error, Result};
