//! Laboratory for branch specialization in sum-aggregated branched networks.
//!
//! A branched model evaluates `M` identically shaped sub-networks on the same
//! input and sums their outputs. The crate provides:
//!
//! - [`diffkit`]: a small reverse-mode AD tape and finite-difference oracles,
//! - [`branchnet`]: branched architectures, parameter storage and evaluation,
//! - [`losses`]: squared-L2 and clamped cross-entropy with their `dL/df`,
//! - [`trainer`]: plain gradient descent with trace recording,
//! - [`speclab`]: response/covariance, gradient factorization and Hessian
//!   block metrics,
//! - [`diffusion`]: discrete diffusion band decomposition with exact
//!   reconstruction,
//! - [`experiments`]: toy sweeps, blob classification and image decomposition
//!   runners,
//! - [`cli`]: the `branchlab` command-line entry point.

pub mod branchnet;
pub mod cli;
pub mod data;
pub mod diffkit;
pub mod diffusion;
mod error;
pub mod export;
pub mod experiments;
pub mod losses;
pub mod speclab;
pub mod trainer;
pub mod verify;

pub use branchnet::{BranchArch, BranchKind, BranchedModel, ParamStore, ResidualMode};
pub use data::{Dataset, Sample, Target};
pub use error::{Error, Result};
pub use losses::LossSpec;
