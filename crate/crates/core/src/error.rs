use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: String, column: String },

    #[error("{file} line {line}: cannot parse `{value}` as a number")]
    BadNumber { file: String, line: usize, value: String },

    #[error("{file} line {line}: {message}")]
    MalformedRow { file: String, line: usize, message: String },

    #[error("visit references unknown subject `{0}`")]
    UnknownSubject(String),

    #[error("duplicate subject id `{0}`")]
    DuplicateSubject(String),

    #[error("subject `{id}`: visit times not strictly increasing at t={time}")]
    NonMonotoneVisits { id: String, time: f64 },

    #[error("subject `{id}`: visit at t={time} after restricted treatment time U={restricted}")]
    PostTreatmentVisit { id: String, time: f64, restricted: f64 },

    #[error("subject `{0}` has no visits")]
    NoVisits(String),

    #[error("time {t} outside domain [0, {upper}]")]
    OutOfDomain { t: f64, upper: f64 },

    #[error("covariate `{covariate}`: {message}")]
    InsufficientData { covariate: String, message: String },

    #[error("no treatment events before the horizon")]
    NoEvents,

    #[error("cannot evaluate curve: {0}")]
    EvaluationFailure(String),

    #[error("information matrix is singular")]
    SingularInformation,

    #[error("paths are defined on different time grids")]
    GridMismatch,

    #[error("negative hazard {value} at s={time}")]
    NegativeHazard { time: f64, value: f64 },

    #[error("registry has no subjects")]
    EmptyRegistry,

    #[error("no stratum contributes to the balance statistic")]
    DegenerateStrata,

    #[error("invalid configuration: {field}: {message}")]
    ConfigInvalid { field: String, message: String },

    #[error("method `{method}` requires {channel} covariates but the registry has none")]
    MissingChannel { method: String, channel: String },

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("registry violates its invariants {0} time(s)")]
    InvalidRegistry(usize),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags the error with the pipeline stage it came from; an existing tag
    /// is kept.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// The underlying error with any stage tag removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command-line driver: 2 for configuration
    /// problems, 3 for data problems, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::ConfigInvalid { .. } | Error::MissingChannel { .. } => 2,
            Error::Json { .. } => 2,
            Error::InsufficientData { .. }
            | Error::NoEvents
            | Error::SingularInformation
            | Error::NegativeHazard { .. }
            | Error::DegenerateStrata
            | Error::EvaluationFailure(_)
            | Error::OutOfDomain { .. }
            | Error::GridMismatch => 4,
            _ => 3,
        }
    }
}
