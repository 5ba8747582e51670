//! FedSiKD simulator core: a deterministic federated-learning testbed with
//! statistics-based client clustering and per-cluster teacher→student
//! knowledge distillation, plus FedAvg, random-cluster, and FL+HC baselines.

pub mod clustering;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod tensor;

#[cfg(feature = "testkit")]
pub mod testkit;

pub use error::{Error, Result};
