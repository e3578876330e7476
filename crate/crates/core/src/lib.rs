//! Desk-scale building blocks for residual-transfer domain adaptation: dense
//! f64 tensors with deterministic kernels, a hand-differentiated network with
//! a residual classifier bridge, tensor-fusion MMD and entropy penalties,
//! momentum SGD with an annealed schedule, and synthetic domain-shift
//! datasets with a training view that cannot see target labels.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
