use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),

    #[error("{0}")]
    Diverged(String),

    #[error(transparent)]
    Core(#[from] hosm_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(e.into())
    }
}

impl CliError {
    /// 2 for numerical divergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Diverged(_) | Self::Core(hosm_core::Error::Divergence { .. }) | Self::Core(hosm_core::Error::NonFinite(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}
