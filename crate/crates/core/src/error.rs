use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("score out of range [1,6]: essay {essay_id} has {score}")]
    ScoreOutOfRange { essay_id: String, score: f64 },

    #[error("duplicate version ({essay_id}, {version_k}, {kind})")]
    DuplicateVersion {
        essay_id: String,
        version_k: u32,
        kind: String,
    },

    #[error("duplicate essay id {0}")]
    DuplicateEssay(String),

    #[error("unknown group label {0:?}")]
    UnknownGroup(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("panel validation failed: {0}")]
    Validation(String),

    #[error("empty subset")]
    EmptySubset,

    #[error("unknown covariate {0:?}")]
    UnknownCovariate(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("feature manifest mismatch: model {model}, dataset {dataset}")]
    ManifestMismatch { model: String, dataset: String },

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("zero target variance")]
    ZeroVariance,

    #[error("fold {fold} has {count} essays; at least 2 are required")]
    SmallFold { fold: usize, count: usize },

    #[error("single-class fold {0}")]
    SingleClassFold(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty group: no {0} essays")]
    EmptyGroup(String),

    #[error("missing prediction for {0}")]
    MissingPrediction(String),

    #[error("neutral rewrites absent")]
    NeutralAbsent,

    #[error("identity violated: slack {0:e}")]
    IdentityViolation(f64),

    #[error("rank deficient system: {0}")]
    RankDeficient(String),

    #[error("no essays with both versions {0} in group {1}")]
    NoOverlap(String, String),

    #[error("leakage: {0}")]
    Leakage(String),

    #[error("missing placeholder value {0}")]
    MissingPlaceholder(String),

    #[error("verdict parse failure: {0}")]
    VerdictParse(String),

    #[error("verdict length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("endpoint error: {0}")]
    Endpoint(String),

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("accepted rewrite without features: {0}")]
    MissingFeatures(String),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Schema { .. } => "schema",
            Error::ScoreOutOfRange { .. } => "score_out_of_range",
            Error::DuplicateVersion { .. } => "duplicate_version",
            Error::DuplicateEssay { .. } => "duplicate_essay",
            Error::UnknownGroup { .. } => "unknown_group",
            Error::InvalidRecord { .. } => "invalid_record",
            Error::Validation { .. } => "validation",
            Error::EmptySubset => "empty_subset",
            Error::UnknownCovariate { .. } => "unknown_covariate",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ManifestMismatch { .. } => "manifest_mismatch",
            Error::EmptyData { .. } => "empty_data",
            Error::ZeroVariance => "zero_variance",
            Error::SmallFold { .. } => "small_fold",
            Error::SingleClassFold { .. } => "single_class_fold",
            Error::Config { .. } => "config",
            Error::EmptyGroup { .. } => "empty_group",
            Error::MissingPrediction { .. } => "missing_prediction",
            Error::NeutralAbsent => "neutral_absent",
            Error::IdentityViolation { .. } => "identity_violation",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::NoOverlap { .. } => "no_overlap",
            Error::Leakage { .. } => "leakage",
            Error::MissingPlaceholder { .. } => "missing_placeholder",
            Error::VerdictParse { .. } => "verdict_parse",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::Endpoint { .. } => "endpoint",
            Error::MalformedResponse { .. } => "malformed_response",
            Error::MissingFeatures { .. } => "missing_features",
            Error::Serde { .. } => "serde",
            Error::Csv { .. } => "csv",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
