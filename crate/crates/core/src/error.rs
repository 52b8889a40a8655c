use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or incomplete experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A malformed input row, with its 1-based line number.
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    /// Input data violates a precondition of the requested operation.
    #[error("data error: {0}")]
    Data(String),

    /// SGD produced a non-finite loss.
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("curve unfit")]
    CurveUnfit,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this error class.
    ///
    /// 2 = configuration, 3 = data/input, 4 = runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. } | Error::Data(_) | Error::Io(_) | Error::Csv(_) => 3,
            Error::Diverged { .. } | Error::CurveUnfit => 4,
        }
    }
}
