//! Shared-encoder multi-task learning at desk scale.
//!
//! The crate is organised bottom-up: [`tensor`] and [`autodiff`] provide
//! dense `f64` arithmetic with reverse-mode gradients, [`model`] builds a
//! shared encoder and per-task decoders, [`optim`] holds Adam, and
//! [`trainer`] runs the sampled-task training loop. [`metrics`],
//! [`diagnostics`] and [`tasks`] cover evaluation, gradient-conflict
//! analysis and synthetic data.

pub mod autodiff;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod format;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use autodiff::{finite_diff_grad, GradMap, Graph, ParamId, Var};
pub use error::*;
pub use tensor::{Activation, Tensor};
