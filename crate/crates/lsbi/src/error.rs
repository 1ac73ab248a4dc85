//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit statuses: parameter,
//! configuration, and file-format problems are usage errors (exit 2), while
//! numerical failures and exceeded iteration budgets are runtime errors
//! (exit 3). Library callers can match on the variants directly.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A function argument violates its documented precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A run configuration failed validation (bad value, unknown key, …).
    #[error("configuration error: {0}")]
    Config(String),

    /// Filesystem-level failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A container, CSV, or checkpoint file does not have the expected
    /// layout (wrong magic, version, checksum, or shape).
    #[error("file format error: {0}")]
    Format(String),

    /// Numerical breakdown: singular system, eigensolver failure,
    /// non-finite intermediate, or a diverged training run.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The closed-form latent-likelihood integral does not exist because an
    /// encoder variance reaches the prior variance. `row` identifies the
    /// offending batch entry when the failure occurs inside a batched call.
    #[error(
        "latent likelihood integral diverges in dimension {dim} \
         (u = {u:.6} >= 1){}",
        row.map(|r| format!(" at batch row {r}")).unwrap_or_default()
    )]
    DivergentIntegral {
        dim: usize,
        u: f64,
        row: Option<usize>,
    },

    /// The tempering loop hit its round cap before reaching β = 1. The
    /// partial diagnostics (β schedule, ESS, acceptance rates) are carried
    /// along for post-mortem inspection.
    #[error(
        "tempering did not reach beta = 1 within {max_rounds} rounds \
         (last beta = {last_beta:.6})"
    )]
    MaxRoundsExceeded {
        max_rounds: usize,
        last_beta: f64,
        diagnostics: Box<crate::smc::SmcDiagnostics>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit status the CLI should terminate with for this error:
    /// 2 for usage/configuration problems, 3 for runtime failures.
    pub fn exit_status(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Config(_) | Error::Format(_) => 2,
            Error::Io { .. }
            | Error::Numerical(_)
            | Error::DivergentIntegral { .. }
            | Error::MaxRoundsExceeded { .. } => 3,
        }
    }
}
