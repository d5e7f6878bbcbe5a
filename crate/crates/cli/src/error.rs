use std::path::PathBuf;

use crate::config::ConfigErrors;

/// Exit codes: 0 when every tolerance rule passes, 2 for numeric or
/// hypothesis failures (including failed rules), 1 for usage errors.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid argument in configuration:\n{0}")]
    Config(ConfigErrors),

    #[error("{module}: {source}")]
    Core {
        module: &'static str,
        #[source]
        source: mflow_core::Error,
    },

    #[error("i/o failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Io { .. } => EXIT_USAGE,
            CliError::Core { source, .. } => match source {
                mflow_core::Error::InvalidArgument(_) | mflow_core::Error::CapacityExceeded { .. } => EXIT_USAGE,
                mflow_core::Error::NumericFailure { .. } | mflow_core::Error::IndependenceViolation(_) => {
                    EXIT_FAILURE
                }
            },
        }
    }
}

/// Attaches the module name to a core error.
pub(crate) trait InModule<T> {
    fn in_module(self, module: &'static str) -> Result<T, CliError>;
}

impl<T> InModule<T> for mflow_core::Result<T> {
    fn in_module(self, module: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core { module, source })
    }
}
