use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration value; the message names the offending key.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// API misuse, e.g. a second backward pass without resetting gradients.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{op}: input outside domain ({detail})")]
    Domain { op: &'static str, detail: String },

    /// Non-finite loss during training.
    #[error("training aborted at iteration {iteration}: non-finite loss {loss} (grad norm {grad_norm})")]
    Diverged {
        iteration: u64,
        loss: f64,
        grad_norm: f64,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
