use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("vehicle {vehicle} at ({x:.2}, {y:.2}) is not on any mapped lane")]
    OffMap { vehicle: u32, x: f64, y: f64 },

    #[error("goal on lane {lane} is unreachable from lane {from}")]
    UnreachableGoal { from: u32, lane: u32 },

    #[error("feature consistency error: {0}")]
    Consistency(String),

    #[error("no trained tree for goal type {0}")]
    MissingModel(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported constraint: {0}")]
    Unsupported(String),

    #[error("insufficient episodes: need {needed}, have {have}")]
    InsufficientEpisodes { needed: usize, have: usize },

    #[error("split mismatch: {0}")]
    SplitMismatch(String),

    #[error("model version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
