//! Desk-scale knowledge-distillation laboratory: a reverse-mode autodiff
//! tape, a family of balanced divergence losses, toy MLP models, synthetic
//! datasets, and a deterministic training harness.

pub mod checks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::Graph;
pub use tensor::Tensor;
