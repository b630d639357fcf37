//! Bayesian adversarial training for binary feed-forward malware classifiers
//! over fixed-width feature vectors.
//!
//! The crate trains an ensemble of network parameter particles with Stein
//! variational gradient descent, optionally hardening each batch with
//! expectation-over-transformation PGD adversarial examples, and provides:
//!
//! - [`dataio`]: dataset loading, synthesis, normalization, and splits;
//! - [`network`]: feed-forward classifiers with analytic parameter and
//!   input gradients (no autodiff dependency);
//! - [`attacks`]: FGSM / PGD / EoT-PGD feature-space attacks under an
//!   L-infinity budget with per-feature perturbation bounds;
//! - [`svgd`]: particle-ensemble training and posterior-predictive inference;
//! - [`riskgap`]: the empirical/adversarial risk gap bound and its check;
//! - [`toyps`]: a miniature problem space (sectioned byte programs plus a
//!   deterministic feature map) for padding-attack experiments;
//! - [`eval`]: ROC/AUC, robustness sweeps, and transferability tables;
//! - [`cli`]: subcommand drivers behind the `advmal` binary.

pub mod attacks;
pub mod cli;
pub mod dataio;
pub mod eval;
pub mod network;
pub mod riskgap;
pub mod svgd;
pub mod toyps;
pub mod util;

mod error;

pub use error::{Error, Result};
