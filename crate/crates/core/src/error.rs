use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("insufficient data for {what}: need at least {needed} rows, got {got}")]
    InsufficientData {
        what: String,
        needed: usize,
        got: usize,
    },

    #[error("singular design matrix in {0} (rank deficiency beyond ridge rescue)")]
    SingularDesign(String),

    #[error(
        "optimizer failed to converge for {context}: best gradient norm {grad_norm:.3e} after {iterations} iterations over {restarts} starts"
    )]
    ConvergenceFailure {
        context: String,
        iterations: usize,
        grad_norm: f64,
        restarts: usize,
        /// Best coefficient vectors found, one per arm.
        best: Vec<Vec<f64>>,
    },

    #[error("numerical failure in {0}: non-finite objective")]
    NumericalFailure(String),

    #[error("bootstrap unstable: {failed} of {total} resamples failed")]
    BootstrapUnstable { failed: usize, total: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("latent ground truth required but not provided")]
    MissingLatent,
}

pub type Result<T> = std::result::Result<T, Error>;
