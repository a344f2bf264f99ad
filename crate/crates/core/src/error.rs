use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or architecture; `field` names the offending key.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Caller broke an operation's contract (shapes, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// `sigma_t^2 * delta_t == 0`, so the step covariance cannot be inverted.
    #[error("degenerate step covariance at t = {t} (sigma = {sigma}, delta = {delta})")]
    DegenerateCovariance { t: f64, sigma: f64, delta: f64 },

    #[error("non-finite loss at iteration {iteration}, batch {batch}: {dump}")]
    NonFiniteLoss {
        iteration: usize,
        batch: usize,
        dump: String,
    },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Contract(format!(
            "{what}: expected length {want}, got {got}"
        )));
    }
    Ok(())
}
