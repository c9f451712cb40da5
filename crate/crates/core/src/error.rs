use thiserror::Error;

/// Errors surfaced by the pipeline. Validation failures are distinguished from
/// runtime failures so the command line can map them to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("autodiff: {0}")]
    Graph(String),
    #[error("{format} parse error: {kind}")]
    Parse { format: &'static str, kind: ParseKind },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Ways a file header or payload can be malformed.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseKind {
    #[error("bad magic {0:?}")]
    BadMagic(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("zero scale factor")]
    ZeroScale,
    #[error("unsupported maxval {0}")]
    Maxval(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

impl Error {
    pub fn parse(format: &'static str, kind: ParseKind) -> Self {
        Error::Parse { format, kind }
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. } | Error::Invalid(_) | Error::Parse { .. } | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
