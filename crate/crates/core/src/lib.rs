//! Finite-horizon linear-quadratic policy learning with uncertainty
//! quantification.
//!
//! The crate provides:
//! - problem definition and trajectory simulation ([`system`]),
//! - the closed-form Riccati/value layer used as ground truth ([`riccati`]),
//! - exact and zeroth-order stochastic policy gradient with running
//!   Polyak-Ruppert averages ([`pg`]),
//! - an online multiplier bootstrap producing confidence intervals and
//!   confidence sets for the optimal gains ([`bootstrap`]),
//! - asymptotic-covariance oracles and distribution diagnostics
//!   ([`asymptotics`]),
//! - a structured system-spec file format ([`config`]).

pub mod asymptotics;
pub mod bootstrap;
pub mod config;
pub mod error;
pub mod mat;
pub mod pg;
pub mod presets;
pub mod riccati;
pub mod stream;
pub mod system;

pub use error::{LqError, Result};
pub use system::{InitModel, LqSystem, NoiseModel, Policy, Trajectory};
