use thiserror::Error;

/// Error type shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or argument. The message names the offending
    /// field (e.g. `datagen.p: must be at least 1`).
    #[error("configuration error: {0}")]
    Config(String),

    /// Matrix/vector dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A state left the finite range during integration.
    #[error("trajectory diverged at time index {index} (t = {time}){}",
        .trajectory.map(|i| format!(" in trajectory {i}")).unwrap_or_default())]
    Divergence {
        index: usize,
        time: f64,
        trajectory: Option<usize>,
    },

    /// The eigenvector matrix of `A` is too ill-conditioned to trust the
    /// eigendecomposition. Pick a different `A`.
    #[error(
        "matrix is numerically non-diagonalizable (eigenvector condition {cond:.3e} \
         exceeds {limit:.0e}); choose a different A"
    )]
    NonDiagonalizable { cond: f64, limit: f64 },

    /// The training loss became non-finite.
    #[error("training diverged at step {step} (epoch {epoch}): loss is not finite")]
    TrainingDiverged { step: usize, epoch: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("data format error: {0}")]
    Format(String),
}

impl Error {
    /// Stable process exit code for the CLI: 2 validation, 3 divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::NonDiagonalizable { .. } => 2,
            Error::Divergence { .. } | Error::TrainingDiverged { .. } => 3,
            Error::Io(_) | Error::Json(_) | Error::Format(_) => 4,
        }
    }

    pub(crate) fn with_trajectory(self, i: usize) -> Self {
        match self {
            Error::Divergence { index, time, .. } => Error::Divergence {
                index,
                time,
                trajectory: Some(i),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
