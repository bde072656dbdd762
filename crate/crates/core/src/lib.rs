//! Federated class-incremental learning with orthogonal low-rank adapters.
//!
//! A frozen attention backbone is adapted per task through LoRA branches on
//! its key and value projections. Each task's frozen `A` factor is chosen
//! orthogonal to a per-client gradient projection memory, so training the
//! `B` factor cannot disturb what earlier tasks rely on. Clients train `B`
//! locally; the server averages `B` by sample count and averages the clients'
//! proposals for the next task's `A`.

#[cfg(test)]
mod testutil;

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod federated;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod subspace_memory;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
