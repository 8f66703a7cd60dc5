//! Spatially-dependent Indian buffet process (SIBP).
//!
//! Binary feature matrices whose stick-breaking proportions are logistic
//! transforms of latent Gaussian-process fields, so that nearby sites tend to
//! share features. The crate provides prior simulation and its diagnostics, a
//! blocked Gibbs sampler with Pólya-gamma augmentation for multinomial and
//! negative-binomial factor models, a nearest-neighbor GP path for large
//! numbers of sites, out-of-sample factor prediction and evaluation metrics.

pub mod error;
pub mod kernels;
pub mod linalg;
pub mod pg;
pub mod prior;
pub mod numeric;
pub mod binary;
pub mod nngp;
pub mod latent;
pub mod repulsion;
pub mod chain;
pub mod gibbs;
pub mod multinomial;
pub mod negbin;
pub mod predict;
pub mod metrics;
pub mod scenario;
pub mod io;
pub mod verify;
pub mod geweke;

pub use error::{Error, Result};
pub use kernels::{build_correlation, CorrelationMatrix, KernelSpec, Location};
