use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LicaError>;

#[derive(Debug, Error)]
pub enum LicaError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("pattern budget exceeded: {patterns} patterns > budget {budget}; use subspace mode or set allow_exact_over_budget")]
    Budget { patterns: u128, budget: u64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("initialization error: {0}")]
    Init(String),

    #[error("MoG component collapse in IC {ic}, component {component}; reduce m")]
    ComponentCollapse { ic: usize, component: usize },

    #[error("matching error: {0}")]
    Matching(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{context} (iteration {iteration}): {source}")]
    AtIteration {
        iteration: usize,
        context: &'static str,
        #[source]
        source: Box<LicaError>,
    },
}

impl LicaError {
    /// Short machine-readable tag, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            LicaError::Io(_) => "io",
            LicaError::Format(_) => "format",
            LicaError::UnsupportedVersion(_) => "unsupported_version",
            LicaError::Argument(_) => "argument",
            LicaError::Rank(_) => "rank",
            LicaError::Budget { .. } => "budget",
            LicaError::Numeric(_) => "numeric",
            LicaError::Init(_) => "initialization",
            LicaError::ComponentCollapse { .. } => "component_collapse",
            LicaError::Matching(_) => "matching",
            LicaError::Config(_) => "config",
            LicaError::AtIteration { source, .. } => source.kind(),
        }
    }
}
