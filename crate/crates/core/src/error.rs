//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes surfaced by model evaluation, optimization, proposal
/// construction and data handling.
///
/// Out-of-domain latent points are not errors: joint density evaluation
/// returns negative infinity for those so samplers can reject naturally.
/// Errors are reserved for conditions a caller must fix.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{context}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("validation: {0}")]
    Validation(String),

    /// Cholesky factorization hit a non-positive pivot. `pivot` is the
    /// zero-based row at which the factorization failed.
    #[error("matrix is not positive definite: pivot {pivot} has value {value:.6e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    /// A structural model produced a non-finite prediction inside its
    /// declared domain. `time_index` locates the offending observation.
    #[error("non-finite prediction at time index {time_index}")]
    NonFinitePrediction { time_index: usize },

    /// A derivative estimate came out non-finite at observation `row`,
    /// parameter `col`.
    #[error("non-finite derivative estimate at observation {row}, parameter {col}")]
    NonFiniteDerivative { row: usize, col: usize },

    #[error("objective is not finite at the initial point")]
    NonFiniteObjective,

    /// The jitter ladder was exhausted without producing a factorizable
    /// matrix. `condition` is the eigenvalue-ratio estimate of the matrix
    /// as received.
    #[error("factorization failed after jitter escalation; condition estimate {condition:.3e}")]
    IllConditioned { condition: f64 },

    /// Downstream consumers refuse MAP results without a convergence
    /// certificate unless explicitly overridden.
    #[error(
        "MAP estimate not converged (gradient norm {grad_norm:.3e} after {iterations} \
         iterations); set allow_unconverged to proceed anyway"
    )]
    UnconvergedMap { grad_norm: f64, iterations: usize },

    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
