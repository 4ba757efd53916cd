use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle {angle} rad is too close to pi for a stable logarithm")]
    RotationNearPi { angle: f64 },

    #[error("matrix is not a proper rigid transform: {0}")]
    NotARigidTransform(String),

    #[error("field contains non-finite values")]
    NonFiniteField,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("parse error at byte offset {offset} in {path}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("unsupported dimensionality: {0}")]
    UnsupportedDimensionality(String),

    #[error("label {0} is not in the label table")]
    UnknownLabel(i32),

    #[error("label {0} has no voxels")]
    EmptyLabel(i32),

    #[error("label sets differ: {0}")]
    LabelMismatch(String),

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("non-finite image intensities")]
    NonFiniteIntensities,

    #[error("observation graph is disconnected: components {0:?}")]
    DisconnectedGraph(Vec<Vec<String>>),

    #[error("duplicate edge between {0} and {1}")]
    DuplicateEdge(String, String),

    #[error("unknown node {0}")]
    UnknownNode(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("simplex did not converge after {0} pivots")]
    NumericalFailure(usize),

    #[error("solver failed at voxel {voxel:?}, coordinate {coord}: {source}")]
    VoxelSolve {
        voxel: [usize; 3],
        coord: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing latent transform for timepoint {0}")]
    MissingLatentTransform(String),

    #[error("timepoint {0} has no label map")]
    MissingLabels(String),

    #[error("acquisition times have zero variance")]
    DegenerateTimes,

    #[error("need at least {needed} timepoints, got {got}")]
    InsufficientTimepoints { needed: usize, got: usize },

    #[error("need at least {needed} samples per group, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("denominator is zero")]
    ZeroDenominator,

    #[error("invalid study design: {0}")]
    InvalidDesign(String),

    #[error("file name does not follow <ref>_<target> convention: {0}")]
    NamingConvention(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
