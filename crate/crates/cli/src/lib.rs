//! Command-line driver for the random-conditioning distillation lab:
//! run manifests, checkpoint persistence, caches, reports, and sample
//! sheets. The `rclab` binary is a thin wrapper over [`commands::run`].

pub mod checkpoint;
pub mod commands;
pub mod manifest;
pub mod sheet;

pub use commands::{init_threads, run, RunOutputs};
pub use manifest::RunManifest;
