use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown label code {0}")]
    UnknownLabel(u32),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Every DEM cell is an edge, so no ground seed exists.
    #[error("degenerate elevation model: every cell lies on an edge")]
    DegenerateDem,

    #[error("descriptor origin {x},{y} lies on an obstacle")]
    OriginOnObstacle { x: usize, y: usize },

    #[error("map has no traversable cells")]
    NoTraversableCells,

    #[error("rotation {0} deg is not a multiple of the angular step")]
    RotationNotMultiple(f64),

    #[error("descriptor length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("degenerate point set: {0}")]
    DegeneratePoints(&'static str),

    /// Raised when RANSAC finds fewer consistent correspondences than required.
    #[error("not yet localizable: best consensus {found} < required {required}")]
    NotLocalizable { found: usize, required: usize },

    #[error("empty region: {0}")]
    EmptyRegion(&'static str),

    #[error("world spec too small: {0}")]
    WorldTooSmall(String),

    #[error("world is disconnected: {0}")]
    Disconnected(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
