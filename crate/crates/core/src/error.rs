use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {msg}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    #[error("time step {t} out of range 1..={max}")]
    TimeStepOutOfRange { t: usize, max: usize },

    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    #[error("invalid argument for {what}: {msg}")]
    InvalidArgument { what: &'static str, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("checkpoint/config mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(what: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            what,
            msg: msg.into(),
        }
    }
}
