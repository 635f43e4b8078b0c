use thiserror::Error;

/// Errors shared by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A shape is invalid on its own (wrong rank, zero dim, data length).
    #[error("invalid shape for {what}: {detail}")]
    InvalidShape { what: &'static str, detail: String },

    /// A row that must carry mass has none (zero norm, or fully masked).
    #[error("degenerate row {row}: {detail}")]
    DegenerateRow { row: usize, detail: String },

    /// Bad configuration (dims that do not divide, fractions off, etc).
    #[error("config error: {0}")]
    Config(String),

    /// Bad input data (unreadable corpus, out-of-range token ids, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced or encountered non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint container is unreadable or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
