//! Bayesian density regression with the logit stick-breaking prior.
//!
//! The conditional density of a response `y` given a predictor `x` is a
//! finite mixture of Gaussian linear regressions whose weights come from a
//! stick-breaking construction with logistic-regression stick proportions.
//! Three posterior engines are provided: a Pólya-Gamma data-augmented Gibbs
//! sampler ([`gibbs`]), an expectation conditional maximization routine for
//! the posterior mode ([`ecm`]) and a coordinate ascent mean-field
//! variational approximation ([`cavi`]).

pub mod basis;
pub mod data;
pub mod cavi;
pub mod density;
pub mod diagnostics;
pub mod ecm;
pub mod error;
pub mod gibbs;
pub mod init;
pub mod linalg;
pub mod model;
pub mod polya_gamma;
pub mod rng;
pub mod run;
pub mod special;
pub mod synthetic;

pub use error::{LsbpError, Result};
