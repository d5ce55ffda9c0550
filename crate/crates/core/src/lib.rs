//! Conformal margin risk minimization (CMRM) for learning with noisy labels.
//!
//! CMRM is a regularizer added to any classification loss. On each
//! mini-batch it computes every sample's confidence margin (probability of the
//! observed label minus the best competing probability), takes a conformal
//! lower quantile of those margins as a threshold, and penalizes the negative
//! margin of each sample weighted by a sigmoid of its distance above the
//! threshold. Samples far below the threshold, which are likely mislabeled,
//! are smoothly ignored.
//!
//! The crate contains everything needed to reproduce that training recipe at
//! desk scale:
//!
//! - [`model`]: linear and two-layer MLP classifiers with manual gradients;
//! - [`losses`]: CE, focal, GCE, LDAM and hinge base losses;
//! - [`cmrm`]: margins, batch quantiles, the multi-class risk and the binary
//!   two-threshold variant;
//! - [`noise`] and [`data`]: label-noise injection, synthetic data, CSV I/O;
//! - [`trainer`]: SGD with momentum, weight decay and milestone decay;
//! - [`conformal`] and [`metrics`]: APS prediction sets and evaluation metrics;
//! - [`verify`]: finite-difference and brute-force oracles plus Monte Carlo
//!   checks of the batch-quantile concentration;
//! - [`config`] and [`cli`]: experiment configuration and the `cmrm` command.

pub mod cli;
pub mod cmrm;
pub mod config;
pub mod conformal;
pub mod data;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{Architecture, ModelParams, ProbVector};
