//! Quasi-likelihood inference for the panel AR(1) model with individual effects.
//!
//! The crate fits the random- and fixed-effects Gaussian likelihoods, tests
//! restrictions on the autoregressive parameter including the unit root,
//! builds confidence sets by test inversion, computes local power envelopes
//! and runs Monte Carlo experiments.

pub mod dgp;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod inference;
pub mod io;
pub mod jet;
pub mod likelihood;
pub mod matrixkit;
pub mod power;

pub use error::{Error, Result};
