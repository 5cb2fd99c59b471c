use thiserror::Error;

/// Errors surfaced by the kinetic solver.
#[derive(Debug, Error)]
pub enum KineticsError {
    /// Invalid construction parameters (grid size, config values, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Two objects that must share a grid (or an operator cache) do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A numerical invariant required by the method was violated.
    #[error("numerical invariant violated: {0}")]
    Invariant(String),

    /// An iterative solver failed to reach its tolerance.
    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    /// A non-finite value appeared where the scheme requires finite data.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, KineticsError>;
