use thiserror::Error;

/// Unified error type for the simulator core.
#[derive(Debug, Error)]
pub enum Error {
    /// Operands with incompatible dimensions.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A parameter value outside its documented domain.
    #[error("invalid config: {0}")]
    Config(String),

    /// A serialized payload that does not match its manifest.
    #[error("codec: {0}")]
    Codec(String),

    /// A client partition that cannot satisfy its constraints.
    #[error("partition: {0}")]
    Partition(String),

    /// Malformed text input, with a 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: impl Into<String>, rhs: impl Into<String>) -> Self {
        Error::Shape {
            op,
            lhs: lhs.into(),
            rhs: rhs.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
