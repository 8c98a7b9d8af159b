use msfair::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}: file not found")]
    MissingFile(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type CliResult<T> = Result<T, CliError>;

pub fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl CliError {
    /// 2 config or validation, 3 I/O, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingFile(_) | CliError::Io(_) => 3,
            CliError::Core(e) => match e.root() {
                CoreError::Io(_) => 3,
                CoreError::Csv(c) if c.is_io_error() => 3,
                CoreError::Diverged { .. }
                | CoreError::NumericalOverflow { .. }
                | CoreError::Numerical(_)
                | CoreError::NonFinite { .. }
                | CoreError::DegenerateDesign(_)
                | CoreError::Collinear { .. } => 4,
                _ => 2,
            },
        }
    }
}
