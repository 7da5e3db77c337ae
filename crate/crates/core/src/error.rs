use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("{condition} violated: max residual {max_residual:.3e} (residuals {residuals:?})")]
    Assumption {
        condition: &'static str,
        max_residual: f64,
        residuals: Vec<f64>,
    },

    #[error("incompatible grids: {0}")]
    Grid(String),

    #[error("unknown fixture `{0}`")]
    UnknownFixture(String),

    #[error("{0}")]
    Refused(String),

    #[error("config error at {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::Shape {
        what,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
