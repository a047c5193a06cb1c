use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rle decode: {0}")]
    Decode(String),

    #[error("rle encode: {0}")]
    Encode(String),

    #[error("geometry mismatch: expected {expected:?}, found {found:?}")]
    Geometry {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("soft-iou gradient undefined: union is zero")]
    UndefinedGradient,

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("incomplete scores: no score for reference {ref_id:?}, candidate {candidate_id:?}")]
    IncompleteScores { ref_id: String, candidate_id: String },

    #[error("missing ground truth for {0:?}")]
    MissingGroundTruth(String),

    #[error("missing prediction for reference {0:?}")]
    MissingPrediction(String),

    #[error("missing selection for reference {0:?}")]
    MissingSelection(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("instance too large for enumeration: {objects} objects, {candidates} candidates (limit {max_objects}x{max_candidates})")]
    TooLarge {
        objects: usize,
        candidates: usize,
        max_objects: usize,
        max_candidates: usize,
    },

    #[error("infeasible assignment: {0}")]
    Infeasible(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("{path}:{line}: {message}")]
    Validation {
        path: String,
        line: usize,
        message: String,
    },

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable tag used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Decode(_) => "decode",
            Error::Encode(_) => "encode",
            Error::Geometry { .. } => "geometry",
            Error::InvalidValue(_) => "invalid_value",
            Error::UndefinedGradient => "undefined_gradient",
            Error::DegenerateVector(_) => "degenerate_vector",
            Error::EmptyInput(_) => "empty_input",
            Error::IncompleteScores { .. } => "incomplete_scores",
            Error::MissingGroundTruth(_) => "missing_ground_truth",
            Error::MissingPrediction(_) => "missing_prediction",
            Error::MissingSelection(_) => "missing_selection",
            Error::UnknownId(_) => "unknown_id",
            Error::TooLarge { .. } => "too_large",
            Error::Infeasible(_) => "infeasible",
            Error::Parameter(_) => "parameter",
            Error::Validation { .. } => "validation",
            Error::Mismatch(_) => "mismatch",
            Error::Image(_) => "image",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
