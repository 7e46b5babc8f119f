#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Calibration of softmax classifiers by parameter ensembling by
//! perturbation (PEP).
//!
//! A classifier is trained once by maximum likelihood. At inference time,
//! Gaussian (or variance-matched uniform) noise of scale `sigma` is added to
//! its weights to form an ensemble whose averaged prediction is better
//! calibrated than the single model. `sigma` is picked by golden-section
//! search on validation log-likelihood.
//!
//! Module map:
//!
//! - [`nn`]: dense ReLU networks, softmax, exact gradients
//! - [`data`]: IDX files, synthetic blobs, seeded splits
//! - [`train`]: Adam/SGD training with per-epoch checkpoints
//! - [`pep`]: perturbation ensembles and the sigma search
//! - [`temperature`]: temperature scaling baseline
//! - [`metrics`]: NLL, Brier, reliability bins, ECE, symmetrized KLD
//! - [`curvature`]: Laplacian / Fisher-trace probes of the ensemble gain
//! - [`config`] and [`commands`]: the experiment workflows behind the `pep` binary
//!
//! All arithmetic is `f64`. Every random draw comes from a stream derived
//! from a master seed (see [`rng`]), so results are bit-reproducible.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod curvature;
pub mod data;
pub mod error;
pub mod golden;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod pep;
pub mod rng;
pub mod temperature;
pub mod train;

pub use data::{Dataset, SplitSpec, SplitTag};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use nn::{NetworkSpec, ParamVector, ProbMatrix};
pub use pep::{PerturbConfig, SigmaSearchConfig};
pub use train::TrainConfig;
