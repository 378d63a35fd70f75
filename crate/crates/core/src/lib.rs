//! Desk-scale federated learning laboratory.
//!
//! The crate simulates federated training with pluggable server and client
//! rules (FedAvg, FedProx, FedSAM, FedDyn, FedDyn+SAM, two-exchange server SAM
//! and one-exchange server SAM with ADMM) and ships the diagnostics used to
//! compare them: Hessian power iteration, 1D/2D loss slices, the pseudo-gradient
//! alignment metric and communication accounting.
//!
//! Modules, bottom-up:
//! - [`numcore`]: parameter vectors, a small MLP classifier, exact gradients, HVPs.
//! - [`datagen`]: synthetic Gaussian-cluster data and Dirichlet label partitioning.
//! - [`localopt`]: client-side steps (SGD, SAM, proximal and ADMM corrections).
//! - [`federation`]: the server round loop and communication ledger.
//! - [`flatness`]: sharpness and landscape diagnostics.
//! - [`experiment`]: configs, sweeps, metrics files and run comparison.

pub mod datagen;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod flatness;
pub mod localopt;
pub mod numcore;
pub mod seed;

pub use error::{Error, Result};
pub use numcore::{ModelArch, ParamVector};
