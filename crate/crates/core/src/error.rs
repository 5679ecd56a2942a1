use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("{0}: matrix is not positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("rank deficient input: column {column} could not be orthonormalized")]
    RankDeficient { column: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed container {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
