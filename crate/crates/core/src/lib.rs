//! Learning quadratic embeddings of nonlinear dynamical systems.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod qdyn;
pub mod odeint;
pub mod systems;
pub mod nets;
pub mod train;
pub mod baselines;
pub mod eval;
