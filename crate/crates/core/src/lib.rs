//! Dropout and Dropconnect on shallow linear networks.
//!
//! The crate covers the whole pipeline around the dropout-induced objective
//! `J(W) = E[ ||Y - (W2 ⊙ F2)(W1 ⊙ F1)||_F^2 ]`:
//!
//! - [`model`]: data and weight types, the three objectives and the mask sampler.
//! - [`calculus`]: exact gradients, the dense Hessian of the scaled risk,
//!   finite-difference oracles and spectral helpers.
//! - [`minimizers`]: effective rank, shrinkage thresholding, the Horn
//!   construction and balanced global minimizers.
//! - [`rates`]: closed-form convergence-rate bounds and their numeric
//!   Hessian counterpart.
//! - [`flow`]: deterministic and stochastic gradient descent with the
//!   conservation-law monitor.
//! - [`fitting`]: exponential tail fits and the rate hyper-model fits.
//! - [`harness`]: whitening, CSV ingestion, deterministic sweeps and tables.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN too

pub mod calculus;
pub mod error;
pub mod fitting;
pub mod flow;
pub mod harness;
pub mod minimizers;
pub mod model;
pub mod rates;

pub use error::{Error, Result};

/// Dense real matrix used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
