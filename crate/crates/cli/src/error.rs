use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration or invocation, including refusals to overwrite.
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::MissingArtifact(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl From<ssdet::Error> for CliError {
    fn from(e: ssdet::Error) -> Self {
        use ssdet::Error as E;
        match e {
            E::Capacity { .. } | E::Stratification { .. } | E::Policy(_) | E::Domain(_) => Self::Config(e.to_string()),
            E::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Self::MissingArtifact(e.to_string())
            }
            _ => Self::Runtime(e.to_string()),
        }
    }
}
