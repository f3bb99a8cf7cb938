//! Dense linear-algebra kernel.
//!
//! Everything here is pure: identical inputs give bit-identical outputs. The
//! matrices involved are small (at most a few hundred rows), so all routines
//! are plain dense algorithms without blocking or sparsity.

mod linalg;
mod qp;
mod riccati;

pub use linalg::{block_diag, inf_norm, solve_linear, spectral_radius, LuFactor};
pub use qp::{solve_qp, solve_qp_from, QpProblem, QpSolution, QpStatus};
pub use riccati::{lqr_gain, lyapunov_residual, riccati_residual, solve_dare};

use thiserror::Error;

/// Dense real matrix.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense real column vector.
pub type Vector = nalgebra::DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("singular matrix: pivot {pivot:e} below threshold {threshold:e}")]
    Singular { pivot: f64, threshold: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("riccati iteration did not converge after {iterations} iterations (last step {last_step:e})")]
    NoConvergence { iterations: usize, last_step: f64 },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
