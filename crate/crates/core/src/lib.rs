//! Desk-scale laboratory for distilling conditional diffusion models with
//! random conditioning: a small dense-tensor autodiff core, DDPM/DDIM
//! samplers with classifier-free guidance, toy conditional datasets, the
//! random-conditioning distillation loop, and the evaluation experiments
//! (condition fidelity, condition-swap phase tables, noised-distribution
//! overlap curves, Fréchet distances).

pub mod data;
pub mod container;
pub mod diffusion;
pub mod digest;
pub mod distill;
pub mod error;
pub mod eval;
pub mod models;
pub mod numcore;
pub mod rng;

pub use error::{Error, Result};
