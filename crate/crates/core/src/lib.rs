//! Mean-field solver and finite-N simulator for supermarket models whose
//! servers break down and are repaired.

pub mod cli;
pub mod error;
pub mod fixedpoint;
pub mod kernels;
mod linalg;
pub mod meanfield;
pub mod metrics;
pub mod model;
pub mod simulator;

pub use error::{Error, Result};
pub use model::{ArrivalScheme, FractionState, Model, ModelConfig, RepairScheme};
