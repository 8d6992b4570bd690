//! Continuous-time Kalman-Bucy filtering with dynamical low-rank reduction.
//!
//! The crate provides full-order Kalman-Bucy moments and ensemble filters,
//! the dynamical low-rank Kalman-Bucy process, its particle version with two
//! time integrators, a bilinear finite-element pollution model, and the
//! metrics and study drivers used to compare them.

pub mod dlr;
pub mod enkf;
pub mod error;
pub mod experiments;
pub mod fem;
pub mod flops;
pub mod io;
pub mod kbp;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::Operator;
pub use model::{GaussianState, LinearAffineModel, LowRankState, ObservationPath};
pub use rng::{RngPlan, Stream, StreamTag};
