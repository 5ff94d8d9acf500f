//! Functional risk curves from small computer-experiment datasets.
//!
//! A Gaussian-process metamodel of `Y = G(a, X)` is fitted on a design of
//! experiments; the risk curve `Ψ(a) = P(Y > s | a)` is then estimated with
//! uncertainty bands from a double Monte-Carlo scheme, and two families of
//! sensitivity indices (aggregated Sobol' and perturbed-law indices) are
//! computed on it.

pub mod distributions;
pub mod error;
pub mod frc;
pub mod gp;
pub mod numerics;
pub mod pli;
pub mod predictor;
pub mod rng;
pub mod sobol;
pub mod testbed;

pub use error::{Error, ErrorClass, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
