//! Learning with noisy labels by treating each training label as a learnable
//! distribution, trained jointly with a small from-scratch MLP.
//!
//! The crate is organized bottom-up: [`math`] (softmax, matrices, seeded
//! RNG), [`data`] (synthetic blobs, noise injection, CSV), [`labels`] (the
//! per-sample label variables), [`losses`], [`backbone`] (MLP and SGD),
//! [`trainer`] (the three phases), [`metrics`], [`gradcheck`], and the
//! [`cli`] front end.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod trainer;

pub use backbone::{MlpParams, SgdState};
pub use config::ExperimentConfig;
pub use data::{BlobSpec, Dataset, NoiseKind, NoiseSpec};
pub use error::{Error, Result};
pub use labels::LabelStore;
pub use trainer::{run_ce_baseline, run_experiment, run_experiment_with, RunOptions, StartPoint, TrainReport};
