//! Optimizer amalgamation toolkit.
//!
//! Distills a pool of analytical optimizers into one coordinate-wise learned
//! optimizer with truncated back-propagation through time, optionally hardened
//! by weight-space perturbations, and measures the stability of the result.

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod learned;
pub mod optimizee;
pub mod params;
pub mod perturbation;
pub mod pool;
pub mod rollout;
pub mod seed;
pub mod stability;
pub mod tape;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use params::ParamSet;
pub use tape::{GradMap, Primitive, Tape, Var};
pub use tensor::Tensor;
