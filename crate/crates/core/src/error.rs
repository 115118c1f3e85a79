use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an API precondition (out-of-range index, dead tape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward value or probe became NaN/Inf.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("format error in {what}: {message}")]
    Format { what: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Inconsistent pipeline message flow (batch id mismatch, lost message).
    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("worker {index} failed on batch {batch_id}: {source}")]
    Worker {
        index: usize,
        batch_id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("no sub-model fits the budget of {budget} FLOPs; the smallest needs {smallest}")]
    NoFeasibleModel { budget: u64, smallest: u64 },

    #[error("degenerate probe: {0}")]
    DegenerateProbe(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by NaN/Inf blow-up anywhere in the chain.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::Worker { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
