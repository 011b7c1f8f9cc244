use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed table {0}")]
    MalformedTable(String),
    #[error("invalid table reference: {0}")]
    InvalidRef(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("duplicate table reference {0}")]
    Duplicate(String),
    #[error("no vector store at {}", .0.display())]
    StoreNotFound(PathBuf),
    #[error("corrupt vector store: {0}")]
    CorruptStore(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("query {0} has no relevant tables and is excluded from averaging")]
    ExcludedQuery(String),
    #[error("step {step} failed: {message}")]
    StepFailed { step: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::MalformedTable(_) => "E_MALFORMED_TABLE",
            Error::InvalidRef(_) => "E_INVALID_REF",
            Error::Config(_) => "E_CONFIG",
            Error::Provider(_) => "E_PROVIDER",
            Error::Dimension { .. } => "E_DIMENSION",
            Error::Duplicate(_) => "E_DUPLICATE",
            Error::StoreNotFound(_) => "E_STORE_NOT_FOUND",
            Error::CorruptStore(_) => "E_CORRUPT_STORE",
            Error::Corpus(_) => "E_CORPUS",
            Error::Eval(_) => "E_EVAL",
            Error::ExcludedQuery(_) => "E_EXCLUDED_QUERY",
            Error::StepFailed { .. } => "E_STEP_FAILED",
        }
    }
}
