//! Bayesian optimization with additive Gaussian processes.
//!
//! An additive GP models a black-box `f: [0,1]^P -> R` as a sum of
//! independent lower-dimensional GPs over disjoint coordinate groups.
//! Observing only the sum couples the subfunctions a posteriori, so
//! Thompson sampling from the exact joint subfunction posterior is
//! expensive when done naively. This crate implements the efficient
//! autoregressive joint sampler built on residual conditioning, the
//! cheaper marginal approximation that discards cross-group covariance,
//! and an additive lower-confidence-bound acquisition, together with a
//! benchmark harness over randomized synthetic test functions.
//!
//! The numeric core is generic over the scalar type; `f64` aliases are
//! exported at the crate root and are what the CLI and benchmarks use.

pub mod acquisition;
pub mod bench;
pub mod kernels;
pub mod model;
pub mod numerics;
pub mod sampling;
pub mod structure;
pub mod testfns;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Scalar type the numeric core is generic over. Implemented by `f32`
/// and `f64`; all shipped tolerances assume `f64`.
pub trait Real: RealField + FromPrimitive + ToPrimitive + Copy {}
impl<T> Real for T where T: RealField + FromPrimitive + ToPrimitive + Copy {}

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension or shape mismatch between arguments.
    #[error("shape error: {0}")]
    Shape(String),
    /// Cholesky factorization failed even at the maximum jitter.
    #[error("matrix is singular: factorization failed at maximum jitter {max_jitter}")]
    Singular { max_jitter: f64 },
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Internal sequencing violation (e.g. conditioning on a group
    /// that was already removed from the residual chain).
    #[error("logic error: {0}")]
    Logic(String),
    /// Bad experiment configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Hyperparameter fitting could not start.
    #[error("initialization error: {0}")]
    Initialization(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub type PsdFactor64 = numerics::PsdFactor<f64>;
pub type SubKernel64 = kernels::SubKernel<f64>;
pub type AdditiveGp64 = model::AdditiveGpModel<f64>;
pub type Dataset64 = model::Dataset<f64>;
pub type PredictiveGaussian64 = model::PredictiveGaussian<f64>;
pub type GroupSampleSet64 = sampling::GroupSampleSet<f64>;
pub type JointPosteriorSpec64 = sampling::JointPosteriorSpec<f64>;
