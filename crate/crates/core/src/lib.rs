//! Bayesian space-time Poisson models for landslide counts on slope units:
//! latent Gaussian fields, Laplace inference on hyperparameter grids,
//! cross-validation and intensity/susceptibility classification.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod cv;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod hyper;
pub mod laplace;
pub mod mcmc;
pub mod model;
pub mod predict;
pub mod simulate;
pub mod sparse;

pub use error::{Error, Result};
