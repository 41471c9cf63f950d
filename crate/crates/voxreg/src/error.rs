//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed MetaImage header {path}: {detail}")]
    Header { path: PathBuf, detail: String },

    #[error("unsupported element type \"{0}\" (supported: MET_SHORT, MET_USHORT, MET_FLOAT, MET_DOUBLE)")]
    UnsupportedElementType(String),

    #[error("raw file {path} holds {actual} bytes but header implies {expected} ({voxels} voxels x {elem_size} bytes)")]
    RawSizeMismatch {
        path: PathBuf,
        actual: u64,
        expected: u64,
        voxels: usize,
        elem_size: usize,
    },

    #[error("invalid volume geometry: {0}")]
    InvalidGeometry(String),

    #[error("bounding box {detail} out of range for dims {dims:?}")]
    BoxOutOfRange { detail: String, dims: [usize; 3] },

    #[error("volume geometries differ: {0}")]
    GeometryMismatch(String),

    #[error("volume has no voxel with intensity > 0")]
    AllZeroVolume,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("transform matrix is numerically singular (|det| = {0:.3e})")]
    SingularTransform(f64),

    #[error("transform file {path}: {detail}")]
    TransformParse { path: PathBuf, detail: String },

    #[error("degenerate overlap: only {accepted} of {sampled} samples land inside the moving volume (minimum fraction {min_fraction})")]
    DegenerateOverlap {
        accepted: usize,
        sampled: usize,
        min_fraction: f64,
    },

    #[error("degenerate metric: joint entropy is zero (both images constant)")]
    DegenerateMetric,

    #[error("optimizer misuse: {0}")]
    Optimizer(String),

    #[error("phantom generation failed: {0}")]
    Phantom(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
