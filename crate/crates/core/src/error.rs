use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, arity, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },

    /// NaN or infinity where only finite values are allowed.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown prompt token `{0}`")]
    Vocab(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("invalid dataset spec: {0}")]
    Spec(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
