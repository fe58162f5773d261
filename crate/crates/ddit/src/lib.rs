//! Desk-scale flow-matching diffusion transformer with long residual
//! connections, a three-part representation-diversity loss, and CKA/HSIC
//! block-similarity analysis.
//!
//! Everything runs in f64 on the CPU and is deterministic for a fixed seed:
//! training trajectories, sampling, checkpoints, and analysis outputs
//! reproduce bit for bit.
//!
//! The crate is organized as a library first — see the `examples/` directory
//! for one runnable program per capability — plus a single thin `ddit` binary
//! exposing `train`, `sample`, `analyze`, and `gradcheck` subcommands.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interpolant;
pub mod losses;
pub mod model;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{backward, Gradients, Rng, TensorValue};
