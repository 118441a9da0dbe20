use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest is missing required column(s): {0:?}")]
    MissingColumns(Vec<String>),
    #[error("manifest has unknown column(s): {0:?}")]
    UnknownColumns(Vec<String>),
    #[error("manifest row {row}: invalid label {value:?} (expected 0, 1, NMF or AMF)")]
    InvalidLabel { row: usize, value: String },
    #[error("manifest row {row}: column `{column}` must not be empty")]
    EmptyField { row: usize, column: &'static str },
    #[error("manifest row {row}: {message}")]
    MalformedRow { row: usize, message: String },
    #[error("duplicate crop_id {crop_id:?} on rows {first} and {second}")]
    DuplicateCropId {
        crop_id: String,
        first: usize,
        second: usize,
    },
    #[error("source image {image:?} appears under more than one domain ({first:?}, {second:?})")]
    InconsistentDomain {
        image: String,
        first: String,
        second: String,
    },

    #[error("image of {height}x{width} exceeds the {target}x{target} target; use the resize strategy")]
    OversizedInput {
        height: usize,
        width: usize,
        target: usize,
    },
    #[error("image has no pixels")]
    EmptyImage,
    #[error("normalization std is not positive for channel {0}")]
    ZeroStd(usize),

    #[error("cannot split {have} image(s) into {k} folds")]
    TooFewImages { have: usize, k: usize },
    #[error("group split needs at least {k} domains, found {have}")]
    TooFewDomains { have: usize, k: usize },
    #[error("split plan does not match manifest: {0}")]
    PlanMismatch(String),

    #[error("{0} is undefined: a required class is absent")]
    UndefinedMetric(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("ragged input: member {member} has {len} values, expected {expected}")]
    Ragged {
        member: usize,
        len: usize,
        expected: usize,
    },
    #[error("both classes are required, but only {0} is present")]
    SingleClass(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("adapter is already merged")]
    AlreadyMerged,
    #[error("adapter is not merged")]
    NotMerged,

    #[error("unknown backbone {0:?}")]
    UnknownBackbone(String),
    #[error(
        "backbone {backbone:?} needs gated weights from {source_hint}; pass a weights file or set {env_var}"
    )]
    GatedWeights {
        backbone: String,
        source_hint: String,
        env_var: &'static str,
    },
    #[error("weights: {0}")]
    Weights(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
