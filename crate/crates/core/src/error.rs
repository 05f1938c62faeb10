use std::path::PathBuf;

use crate::sim::Group;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("subpopulation index {index} out of range for K = {k}")]
    SubpopulationOutOfRange { index: usize, k: usize },

    #[error("time index {index} out of range for T = {periods}")]
    TimeOutOfRange { index: usize, periods: usize },

    #[error("running mean undefined: subpopulation {subpopulation} has no samples in the {group} group")]
    UndefinedMean { subpopulation: usize, group: Group },

    #[error("factor effect parameter must be finite and nonnegative, got {0}")]
    InvalidLambda(f64),

    #[error("pre-treatment factor matrix is rank deficient (factor dim {factor_dim}, {pre_periods} pre-treatment periods); configure a fixed lambda instead")]
    RankDeficientFactors { factor_dim: usize, pre_periods: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("trial aborted at episode {episode} ({policy}): {source}")]
    Trial {
        episode: usize,
        policy: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config parse error: {0}")]
    Config(#[from] toml::de::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::SubpopulationOutOfRange { .. } | Error::TimeOutOfRange { .. } => "index_out_of_range",
            Error::UndefinedMean { .. } => "undefined_mean",
            Error::InvalidLambda(_) => "invalid_lambda",
            Error::RankDeficientFactors { .. } => "rank_deficient_factors",
            Error::Dimension(_) => "dimension_mismatch",
            Error::Trial { .. } => "trial_failed",
            Error::Io { .. } => "io",
            Error::Config(_) => "config_parse",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
