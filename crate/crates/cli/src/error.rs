use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] odced::Error),

    #[error("{0} verification suite(s) failed")]
    Verify(usize),
}

impl CliError {
    /// 1 usage, 2 data or config, 3 numerical failure, 4 failed verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(odced::Error::Numerical(_)) => 3,
            CliError::Core(_) => 2,
            CliError::Verify(_) => 4,
        }
    }
}
