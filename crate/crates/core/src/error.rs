use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("truncated PGM payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("unsupported PGM maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("CLAHE tile grid {grid_x}x{grid_y} leaves empty tiles on a {width}x{height} image")]
    TileLargerThanImage {
        grid_x: usize,
        grid_y: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("singular affine transform (|det| = {0:e})")]
    SingularTransform(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in layer {index} ({layer})")]
    NonFiniteActivation { index: usize, layer: String },
    #[error("backward called without a recorded forward pass")]
    NoForwardState,
    #[error("unsupported input size {0}")]
    UnsupportedInputSize(usize),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("checkpoint architecture does not match the expected network")]
    ArchitectureMismatch,
    #[error("corrupt checkpoint payload: {0}")]
    CorruptPayload(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no valid triplets in batch")]
    NoValidTriplets,
    #[error("embedding index is empty")]
    IndexEmpty,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
