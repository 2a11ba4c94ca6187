use crate::types::{ImageId, ModelId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the fusion, alignment, scoring and verification routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("image {image_id}, detection {index}: invalid box [{xmin}, {ymin}, {xmax}, {ymax}]")]
    InvalidBox {
        image_id: ImageId,
        index: usize,
        xmin: f64,
        ymin: f64,
        xmax: f64,
        ymax: f64,
    },
    #[error("image {image_id}, detection {index}: confidence {confidence} outside [0, 1]")]
    ConfidenceOutOfRange {
        image_id: ImageId,
        index: usize,
        confidence: f64,
    },
    #[error("image {image_id}, detection {index}: model id {found} does not match container {expected}")]
    ModelIdMismatch {
        image_id: ImageId,
        index: usize,
        expected: ModelId,
        found: ModelId,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("box fusion weights sum to zero")]
    ZeroWeights,
    #[error("objectness threshold given for unknown model {0}")]
    UnknownModel(ModelId),
    #[error("model outputs span several images ({0} and {1})")]
    InconsistentImages(ImageId, ImageId),
    #[error("graph has {vertices} vertices; exhaustive partitioning supports at most {max}")]
    GraphTooLarge { vertices: usize, max: usize },
    #[error("background class 0 cannot be labelled")]
    BackgroundClass,
    #[error("focal model {0} has no negative instances")]
    NoNegatives(ModelId),
    #[error("model {0} is missing from the correctness table")]
    MissingModel(ModelId),
    #[error("team needs at least {min} members, got {got}")]
    TeamTooSmall { min: usize, got: usize },
    #[error("duplicate team member {0}")]
    DuplicateMember(ModelId),
    #[error("invalid team size range {min}..={max} for a pool of {pool}")]
    SizeRange { min: usize, max: usize, pool: usize },
    #[error("ground truth is empty")]
    NoGroundTruth,
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("correlation matrix is not positive semidefinite (min eigenvalue {0})")]
    NotPsd(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures to read or decode an input document, as opposed
    /// to well-formed input that violates an invariant.
    pub fn is_parse(&self) -> bool {
        matches!(self, Error::Format(_) | Error::Io(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
