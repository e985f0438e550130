use thiserror::Error;

/// Errors raised by the solvers, the simulator and the metric layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("index error: level {level} outside 1..={max}")]
    Index { level: usize, max: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid fraction state: {0}")]
    InvalidState(String),

    #[error("unstable configuration: rho = {rho}, rho_tilde = {rho_tilde} (requires rho_tilde < 1)")]
    Unstable { rho: f64, rho_tilde: f64 },

    #[error("integration became unstable at t = {time}: {detail}")]
    Instability { time: f64, detail: String },

    #[error("monotonicity violated at t = {time}: {detail}")]
    Monotonicity { time: f64, detail: String },

    #[error("no convergence after {iterations} iterations (best residual {best_residual:e})")]
    NonConvergence { iterations: usize, best_residual: f64 },

    #[error("root bracket failure at level {level}: f(lo) = {f_lo:e}, f(hi) = {f_hi:e}")]
    BracketFailure { level: usize, f_lo: f64, f_hi: f64 },

    #[error("no root found on [0, {upper}] (grid min {grid_min:e}, grid max {grid_max:e})")]
    NoRoot { upper: f64, grid_min: f64, grid_max: f64 },

    #[error("cross-check disagreement: {primary} vs {secondary} differ by {distance:e} (limit {limit:e})")]
    CrossCheck {
        primary: String,
        secondary: String,
        distance: f64,
        limit: f64,
        primary_solution: Box<crate::fixedpoint::FixedPoint>,
        secondary_solution: Box<crate::fixedpoint::FixedPoint>,
    },

    #[error("negative variance {0:e}")]
    NegativeVariance(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
