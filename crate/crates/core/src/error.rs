use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("series {series_id}: {message}")]
    Validation { series_id: String, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("target spec error: {0}")]
    Spec(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Interval widths at or below the degeneracy floor; raise `--min-width`.
    #[error("degenerate interval at steps {steps:?} (width <= {floor:e}); set a minimum width floor with --min-width")]
    DegenerateInterval { steps: Vec<usize>, floor: f64 },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user-supplied configuration or inputs.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Schema(_) | Error::Spec(_) | Error::Split(_)
        )
    }
}
