use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("{op} in train mode needs a batch of at least 2, got {got}")]
    BatchSize { op: &'static str, got: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("spans use different units ({0} s vs {1} s)")]
    Unit(f64, f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
