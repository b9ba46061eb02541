use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward called before forward or on an empty graph")]
    NoForward,
    #[error("loss node {0} is not a scalar")]
    NonScalarLoss(usize),
    #[error("no head for task {0}")]
    MissingHead(usize),
    #[error("unknown tap {0}")]
    UnknownTap(String),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("task {task}: {msg}")]
    Task { task: usize, msg: String },
    #[error("incomplete ledger: {0}")]
    IncompleteLedger(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
