//! Training harness: joint objective assembly, the training loop, ablation
//! runs, gradient checking, diagnostics, and report emission. The `rtn`
//! binary is a thin command-line layer over this library.

pub mod ablate;
pub mod config;
pub mod diag;
pub mod gradcheck;
pub mod objective;
pub mod report;
pub mod train;

pub use config::{Estimator, KernelPolicy, TrainConfig, Variant};
