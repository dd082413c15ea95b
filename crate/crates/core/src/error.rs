//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A point left the declared range of its chart (base, fiber-vector or
    /// group chart), or a group-chart matrix became singular near a
    /// coordinate singularity.
    #[error("chart domain error: {0}")]
    ChartDomain(String),

    /// The orbit metric d_{μν} failed to be positive definite. Signals a
    /// non-free action or a badly chosen chart.
    #[error("degenerate orbit metric at {context}: {detail}")]
    DegenerateOrbit { context: String, detail: String },

    /// The Faddeev–Popov matrix is singular at the given base point; the
    /// gauge slice is not transversal there and evaluation must not continue.
    #[error("Faddeev-Popov matrix singular (Gribov-type chart failure) at x = {x:?}")]
    GribovChart { x: Vec<f64> },

    /// The horizontal metric h_ij is singular.
    #[error("degenerate horizontal metric: {0}")]
    DegenerateHorizontal(String),

    /// A symmetric square-root argument had an eigenvalue below the
    /// tolerated roundoff floor.
    #[error("square-root argument indefinite: smallest eigenvalue {min_eig}")]
    NumericalDegeneracy { min_eig: f64 },

    /// A path produced a non-finite value (potential blow-up, overflow).
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// A path sample was used without the data the operation requires.
    #[error("path sample contract violation: {0}")]
    PathContract(String),

    /// Representation channel not available for the model's group.
    #[error("unsupported representation channel: {0}")]
    UnsupportedChannel(String),

    /// Monte Carlo ensemble was empty or start points are inconsistent.
    #[error("invalid ensemble: {0}")]
    Ensemble(String),

    /// Run configuration failed validation (maps to exit code 2).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
