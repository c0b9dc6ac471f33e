use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, got {got})")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {what} = {value} is not divisible by {divisor}")]
    Divisibility {
        op: &'static str,
        what: &'static str,
        value: usize,
        divisor: usize,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("{op}: backward requested without a matching forward pass")]
    MissingForward { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("module {index}: {source}")]
    Module {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }

    /// True for errors caused by bad user configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Divisibility { .. } => true,
            Error::Module { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub(crate) fn check_dim(op: &'static str, dim: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape { op, dim, expected, got });
    }
    Ok(())
}

pub(crate) fn check_divisible(op: &'static str, what: &'static str, value: usize, divisor: usize) -> Result<()> {
    if divisor == 0 || !value.is_multiple_of(divisor) {
        return Err(Error::Divisibility {
            op,
            what,
            value,
            divisor,
        });
    }
    Ok(())
}
