//! Inverse PDE problems with data-guided physics-informed neural networks.
//!
//! A network is first fitted to observed data alone, then fine-tuned on the
//! composite physics loss (residual, initial, boundary and data terms) with
//! L-BFGS while the unknown PDE coefficients are estimated.

pub mod adaptive_weights;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod grad_engine;
pub mod losses;
pub mod mlp;
pub mod optimizers;
pub mod pde_suite;
pub mod reporting;
pub mod rng;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
