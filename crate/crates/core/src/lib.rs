//! Cycle-level, execution-driven simulator of a hybrid GCN inference
//! accelerator, paired with a functional reference implementation of the
//! models it runs.
//!
//! The accelerator splits inference into an irregular, memory-bound
//! aggregation phase (SIMD cores fed by interval-shard partitioning with
//! window sliding/shrinking sparsity elimination) and a regular,
//! compute-bound combination phase (multi-granular systolic modules), glued
//! by a ping-pong aggregation buffer and a priority-coordinated DRAM
//! controller. Every simulated run is cross-checked bit for bit against the
//! functional path.

pub mod config;
pub mod coordinator;
pub mod engine;
pub mod error;
pub mod fixed;
pub mod gen;
pub mod graph;
pub mod kernels;
pub mod memory;
pub mod model;
pub mod partition;
pub mod report;
pub mod sample;
pub mod sim;

pub use config::{ModelConfig, SystemConfig};
pub use error::{Result, SimError};
pub use fixed::Fixed32;
pub use graph::{CscGraph, EdgeSet, Matrix};
pub use kernels::KernelRegistry;
