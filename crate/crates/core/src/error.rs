use std::io;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("empty raster")]
    EmptyRaster,
    #[error("degenerate range")]
    DegenerateRange,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pad or resize input: {0}")]
    PadOrResize(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("input smaller than tile: {0}")]
    TileTooLarge(String),
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("backward called without a recorded forward pass")]
    NoForward,
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("tile {index}: {source}")]
    Tile {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
