use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum OiaError {
    /// Tensor/operation shape disagreement; `detail` names the offending axes.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid argument outside of shape concerns (bad target, bad range, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Text parse failure with the 1-based line it occurred on.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Binary file failed structural validation (magic, version, sizes).
    #[error("bad file format: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Configuration inconsistent with data or with itself.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value where one is not allowed; training aborts on these.
    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("empty {0}")]
    Empty(&'static str),
}

impl OiaError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        OiaError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, OiaError>;
