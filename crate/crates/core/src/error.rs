//! Error type shared by every pipeline module.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-numeric or malformed cell. `row` and `col` are 1-based file coordinates.
    #[error("parse error at row {row}, column {col}: {message}")]
    Parse { row: usize, col: usize, message: String },

    #[error("duplicate {kind} identifier '{id}'")]
    DuplicateId { kind: &'static str, id: String },

    #[error("matrix has no genes or no samples")]
    EmptyMatrix,

    #[error("missing column '{0}' in metadata header")]
    MissingColumn(String),

    #[error("unknown condition label '{value}' on line {line}")]
    UnknownCondition { value: String, line: usize },

    #[error("subject '{0}' appears under both Control and Case")]
    InconsistentSubject(String),

    #[error("metadata does not match matrix samples: {0}")]
    MetadataMismatch(String),

    #[error("no genes are shared by all inputs")]
    NoCommonGenes,

    #[error("sample '{0}' occurs in more than one input")]
    DuplicateSample(String),

    #[error("batch label '{0}' occurs in more than one input")]
    DuplicateBatch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value for gene '{gene}', sample '{sample}'")]
    NonFinite { gene: String, sample: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("value {value} + offset is not positive (gene '{gene}', sample '{sample}')")]
    NonPositiveValue { gene: String, sample: String, value: f64 },

    #[error("design matrix is singular: {0}")]
    SingularDesign(String),

    #[error("empirical Bayes iteration did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("batch '{0}' is not covered by the model")]
    UnknownBatch(String),

    #[error("insufficient batches: {0}")]
    InsufficientBatches(String),

    #[error("requested {requested} components but numerical rank is {rank}")]
    RankDeficiency { requested: usize, rank: usize },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("gene '{0}' is not a cluster representative")]
    UnknownRepresentative(String),

    #[error("minority class has {have} samples, need more than {k} for k-nearest neighbours")]
    TooFewMinoritySamples { have: usize, k: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("labels contain a single class")]
    SingleClass,

    #[error("feature count mismatch: model expects {expected}, input has {got}")]
    FeatureCountMismatch { expected: usize, got: usize },

    #[error("{groups} groups cannot fill {folds} folds")]
    TooFewGroups { groups: usize, folds: usize },

    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("model lacks node cover statistics")]
    MissingCover,

    #[error("p-value {0} outside [0, 1]")]
    InvalidPValue(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::MissingColumn(_)
                | Error::UnknownCondition { .. }
                | Error::DuplicateId { .. }
                | Error::EmptyMatrix
                | Error::InconsistentSubject(_)
                | Error::MetadataMismatch(_)
                | Error::NoCommonGenes
                | Error::DuplicateSample(_)
                | Error::DuplicateBatch(_)
                | Error::NonFinite { .. }
                | Error::InvalidParameter(_)
                | Error::InvalidSpace(_)
        )
    }
}
