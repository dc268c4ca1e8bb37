//! Robust batch state estimation with learned measurement uncertainty.
//!
//! The crate estimates range-plus-bias trajectories with a factor graph and
//! a Levenberg-Marquardt inner solver, and wraps that solver in five outer
//! strategies: plain least squares, dynamic covariance scaling, static
//! max-mixtures, batch covariance estimation over residuals, and batch
//! covariance estimation over residuals augmented with observation metadata.

pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod io;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod robust;
pub mod scenario;
pub mod solver;
pub mod vbgmm;

pub use error::{Error, Result};
