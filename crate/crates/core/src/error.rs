use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("column `{0}` is missing from the csv header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NotNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("value `{value}` is not in the vocabulary of field `{field}`")]
    OutOfVocabulary { field: String, value: String },
    #[error("token {token} is out of range for a field with {cardinality} values")]
    TokenOutOfRange { token: u32, cardinality: usize },
    #[error("field `{0}` has no observed values")]
    EmptyField(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-readable category, used by the CLI and the C API.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Schema(_) => "schema",
            Error::MissingColumn(_) => "missing_column",
            Error::NotNumeric { .. } => "not_numeric",
            Error::OutOfVocabulary { .. } => "out_of_vocabulary",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::EmptyField(_) => "empty_field",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Checkpoint(_) => "checkpoint",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
