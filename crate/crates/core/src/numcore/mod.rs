//! Dense-tensor arithmetic, reverse-mode gradients, and AdamW.
//!
//! Everything is generic over [`Scalar`]: training runs in `f32`, while the
//! verification suites instantiate the same code in `f64` for
//! finite-difference gradient checks.

mod adamw;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use params::{ParamGrads, ParamSet};
pub use tape::{forward_and_grad, BoundParams, NodeId, Tape};
pub use tensor::{Scalar, Tensor};
