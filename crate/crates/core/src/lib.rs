//! Energy profiling for FaaS workloads at desk scale.
//!
//! The crate turns a noisy full-system power signal plus a control-plane
//! invocation trace into per-function, per-invocation energy footprints.
//! A built-in simulator generates workloads and power signals with known
//! ground truth so every estimator in the pipeline can be validated
//! end-to-end: skew correction, least-squares disaggregation, online
//! Kalman refinement, fair shared-energy attribution, and footprint-aware
//! power capping.

pub mod attribution;
pub mod capping;
pub mod disagg;
pub mod error;
pub mod kalman;
pub mod numerics;
pub mod signal;
pub mod simulator;
pub mod trace;
pub mod validation;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
