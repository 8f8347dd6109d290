use thiserror::Error;

use crate::corpus::{Country, Gender};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // corpus
    #[error("no label row for image file `{0}`")]
    MissingLabel(String),
    #[error("more than one record for identity `{identity}` and variant {variant}")]
    DuplicateIdentityVariant { identity: String, variant: String },
    #[error("cannot read image `{path}`: {reason}")]
    UnreadableImage { path: String, reason: String },
    #[error("unknown country `{0}`; declare its region before use")]
    UnknownCountry(String),
    #[error("bad label row: {0}")]
    BadLabel(String),
    #[error("bounding box has zero area")]
    EmptyBBox,
    #[error("bounding box {bbox:?} exceeds image {width}x{height}")]
    BBoxOutOfBounds { bbox: [u32; 4], width: u32, height: u32 },
    #[error("group {country}/{gender:?} needs {needed} identities, only {available} available")]
    InsufficientGroup { country: Country, gender: Gender, needed: usize, available: usize },
    #[error("identity `{identity}` has no `{kind}` variant")]
    MissingVariant { identity: String, kind: String },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid variant parameters: {0}")]
    InvalidVariant(String),

    // variants
    #[error("noise amplitude {0} outside (0, 1]")]
    BadAmplitude(f64),
    #[error("spread radius must be at least 1, got {0}")]
    BadRadius(u32),
    #[error("face not found: {0}")]
    FaceNotFound(String),
    #[error("mask polygon self-intersects")]
    SelfIntersectingPolygon,

    // model
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("label `{0}` is not a class of this checkpoint")]
    LabelMismatch(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("model has no convolution layer")]
    NoConvLayer,

    // explain
    #[error("cannot average an empty group")]
    EmptyGroup,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    // audit
    #[error("report has no cell for {0}")]
    MissingCell(String),
    #[error("need at least {needed} cells, found {found}")]
    InsufficientCells { needed: usize, found: usize },

    // backends
    #[error("no face detected by {0}")]
    FaceNotDetected(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingLabel(_) => "MissingLabel",
            Error::DuplicateIdentityVariant { .. } => "DuplicateIdentityVariant",
            Error::UnreadableImage { .. } => "UnreadableImage",
            Error::UnknownCountry(_) => "UnknownCountry",
            Error::BadLabel(_) => "BadLabel",
            Error::EmptyBBox => "EmptyBBox",
            Error::BBoxOutOfBounds { .. } => "BBoxOutOfBounds",
            Error::InsufficientGroup { .. } => "InsufficientGroup",
            Error::MissingVariant { .. } => "MissingVariant",
            Error::InvalidSplit(_) => "InvalidSplit",
            Error::InvalidVariant(_) => "InvalidVariant",
            Error::BadAmplitude(_) => "BadAmplitude",
            Error::BadRadius(_) => "BadRadius",
            Error::FaceNotFound(_) => "FaceNotFound",
            Error::SelfIntersectingPolygon => "SelfIntersectingPolygon",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::LabelMismatch(_) => "LabelMismatch",
            Error::BadCheckpoint(_) => "BadCheckpoint",
            Error::NoConvLayer => "NoConvLayer",
            Error::EmptyGroup => "EmptyGroup",
            Error::DimMismatch(_) => "DimMismatch",
            Error::MissingCell(_) => "MissingCell",
            Error::InsufficientCells { .. } => "InsufficientCells",
            Error::FaceNotDetected(_) => "FaceNotDetected",
            Error::Transport(_) => "TransportError",
            Error::Auth(_) => "AuthError",
            Error::Config(_) => "Config",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
        }
    }

    pub fn is_backend(&self) -> bool {
        matches!(self, Error::FaceNotDetected(_) | Error::Transport(_) | Error::Auth(_))
    }
}

/// Reads a whole file; I/O errors name the path.
pub(crate) fn read_file(path: impl AsRef<std::path::Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub(crate) fn read_text(path: impl AsRef<std::path::Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
