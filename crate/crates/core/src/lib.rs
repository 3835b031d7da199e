//! Debiased batch normalization via a Gaussian process over domain-specific
//! BN parameters, verified on synthetic multi-domain retrieval tasks.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`] / [`tape`] / [`optim`]: a minimal f64 reverse-mode autodiff
//!   engine with exactly the operations the model needs, plus plain SGD.
//! - [`dsbn`]: domain-specific batch normalization — K parallel parameter
//!   sets per layer, batch-statistic training, moving-average population
//!   statistics, and linearization into per-channel affine coefficients.
//! - [`gdnorm`]: the core mechanism — a factorized Gaussian process fitted
//!   over the linearized coefficients across domains, reparameterized path
//!   sampling, the self-refining training step, and the mean path used for
//!   inference.
//! - [`model`] / [`train`]: the embedding network (MLP backbone, DSBN after
//!   every hidden layer, BN bottleneck head, union classifier), identity and
//!   batch-hard triplet losses, and the alternating training schedule with a
//!   shared-BN baseline trainer.
//! - [`datagen`]: synthetic multi-domain retrieval data with controlled
//!   per-domain style shift, and the two batch samplers.
//! - [`evalkit`]: mAP / CMC, single-path, mean-path and ensemble evaluation
//!   with forward counting and timing, the lambda sweep and the path-spread
//!   harness.
//! - [`checkpoint`] / [`config`]: named-array archives and strict
//!   experiment configuration.
//! - [`repro`]: the runnable verification suite behind `repro`.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod dsbn;
pub mod error;
pub mod evalkit;
pub mod gdnorm;
pub mod hashing;
pub mod model;
pub mod optim;
pub mod repro;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{GdError, Result};
