use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: String,
        found: String,
    },
    #[error("malformed header in {context}: {reason}")]
    MalformedHeader { context: String, reason: String },
    #[error("non-rigid pose in {context}: {reason}")]
    NonRigidPose { context: String, reason: String },
    #[error("invalid camera intrinsics in {context}: {reason}")]
    InvalidIntrinsics { context: String, reason: String },
    #[error("degenerate camera {camera}: {reason}")]
    DegenerateCamera { camera: usize, reason: String },
    #[error("non-positive depth {depth} at pixel ({u}, {v}) of view {view}")]
    NonPositiveDepth { view: u32, u: u32, v: u32, depth: f64 },
    #[error("point is behind the camera (camera-frame z = {z})")]
    BehindCamera { z: f64 },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("target of {target} samples is unreachable: at most {reachable} pixels can be sampled")]
    Unreachable { target: usize, reachable: usize },
    #[error("weight tensor {name} does not match the head config: {reason}")]
    ShapeMismatch { name: String, reason: String },
    #[error("non-finite activation in {layer}")]
    NonFiniteActivation { layer: String },
    #[error("backward pass called without a cached forward pass")]
    MissingForwardCache,
    #[error("render backward called on a frame rendered without contributor cache")]
    MissingContributorCache,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn dims(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for failures caused by the filesystem rather than by invalid input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::MissingFile(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
