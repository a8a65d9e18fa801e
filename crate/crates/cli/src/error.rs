use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {path} (run `{stage}` first)")]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error(transparent)]
    Core(#[from] socfusion::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 2 for configuration, 3 for a missing upstream artifact, 4 for
    /// numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use socfusion::Error as E;
        match self {
            Self::Config(_) => 2,
            Self::MissingArtifact { .. } => 3,
            Self::Core(
                E::Numerical { .. }
                | E::Conditioning { .. }
                | E::Fit { .. }
                | E::Training { .. }
                | E::Unobservable
                | E::Parameterization(_),
            ) => 4,
            Self::Core(_) | Self::Io { .. } => 1,
        }
    }
}
