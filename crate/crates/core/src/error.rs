use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op}")]
    NumericState { op: &'static str },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("backward called on an output detached from every differentiable leaf")]
    EmptyTape,
    #[error("oracle integrity: {0}")]
    OracleIntegrity(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("optimizer state error: {0}")]
    Optimizer(String),
    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("data generation error: {0}")]
    Generation(String),
    #[error("training diverged: non-finite loss at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
