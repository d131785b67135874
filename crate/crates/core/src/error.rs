use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("event {index} out of bounds: ({x}, {y}) on a {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },

    #[error("event {index} timestamp {t_us} precedes the previous timestamp {prev_us}")]
    NonMonotone { index: usize, t_us: u32, prev_us: u32 },

    #[error("config error in {location}: {message}")]
    Config { location: String, message: String },

    #[error("simulation error in layer {layer} at bin {bin}: {message}")]
    Simulation {
        layer: usize,
        bin: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::OutOfBounds { .. } => "bounds",
            Error::NonMonotone { .. } => "timestamp",
            Error::Config { .. } => "config",
            Error::Simulation { .. } => "simulation",
            Error::Shape(_) => "shape",
            Error::Diverged { .. } => "diverged",
            Error::Data { .. } => "data",
            Error::Dataset(_) => "dataset",
            Error::Empty(_) => "empty",
            Error::Io { .. } => "io",
        }
    }
}
