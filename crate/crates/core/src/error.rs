use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate embedding: row {row} has norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("graph already consumed by a previous backward pass")]
    GraphReuse,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("structure mismatch: {0}")]
    Structure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("non-finite gradient for parameter `{param}`")]
    Numeric { param: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Structure(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Corruption(_) | Error::Protocol(_) => 3,
            Error::Numeric { .. }
            | Error::Domain { .. }
            | Error::DegenerateEmbedding { .. }
            | Error::DegenerateBatch(_) => 4,
            Error::Io(_) => 3,
            _ => 1,
        }
    }
}
