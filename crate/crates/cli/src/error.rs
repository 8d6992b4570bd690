use std::path::PathBuf;

use crate::config::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Core(#[from] lowrank_kbp::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("{count} column(s) differ by more than {tolerance:e}")]
    BeyondTolerance { count: usize, tolerance: f64 },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 0 ok, 1 other, 2 configuration, 3 numerical divergence, 4 comparison
    /// beyond tolerance.
    pub fn exit_code(&self) -> u8 {
        use lowrank_kbp::Error as E;
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Core(E::NonFiniteState { .. } | E::NotPsd { .. } | E::NotPositiveDefinite(_)) => 3,
            CliError::Core(
                E::RankExceedsWidth { .. }
                | E::TooFewParticles { .. }
                | E::MassMatrixUnsupported(_)
                | E::DimensionMismatch(_)
                | E::EmptySquare(_)
                | E::InvalidGrid(_),
            ) => 2,
            CliError::BeyondTolerance { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
