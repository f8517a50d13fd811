use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, config or missing inputs; exit code 2.
    #[error("{0}")]
    Input(String),

    /// A property or assertion failed; exit code 1.
    #[error("{0}")]
    Failure(String),

    #[error(transparent)]
    Core(#[from] bspo_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Core(bspo_core::Error::Config { .. } | bspo_core::Error::Parse { .. }) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
