use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands do not share grid, clock, scenario or node structure.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A constructor or operation received data violating its contract.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// `(x, q)` lies outside the open cone `x > alpha * lambda * q`.
    #[error("infeasible budget: x = {x} with alpha*lambda*q = {floor_cost}")]
    Infeasible { x: f64, floor_cost: f64 },

    /// `(x, q)` sits exactly on the cone boundary; the only admissible plan is
    /// the constant `lambda * q` (see `primal::boundary_plan`).
    #[error(
        "budget x = {x} equals the floor cost alpha*lambda*q; only the constant plan is admissible"
    )]
    Boundary { x: f64 },

    /// An iterative solver hit its cap before reaching its residual target.
    #[error("no convergence after {iterations} iterations (dual residual {dual_residual:.3e}, complementarity {complementarity:.3e})")]
    NonConvergence {
        iterations: usize,
        dual_residual: f64,
        complementarity: f64,
    },

    /// The requested enumeration is too large.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A construction could not be carried out (zero normalizing mass, broken
    /// monotone sweep, ...).
    #[error("construction failed: {0}")]
    Construction(String),

    /// Level grid too coarse for the envelope to verify.
    #[error("resolution too coarse: {0}")]
    Resolution(String),

    /// Bisection could not bracket its target.
    #[error("bracketing failed: {0}")]
    Bracket(String),

    /// Configuration document violates its schema; carries the field path.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
