use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    ConfigInvalid(Vec<String>),
    #[error("unknown sweep parameter: {0}")]
    UnknownParameter(String),
    #[error(transparent)]
    Core(#[from] taskphase_core::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::ConfigInvalid(_) | Self::UnknownParameter(_) => 2,
            Self::Core(_) | Self::Io { .. } | Self::Runtime(_) => 3,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| Self::Io { context, source }
    }
}
