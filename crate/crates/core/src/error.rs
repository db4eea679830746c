use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("concept description for {concept_id} is missing the {perspective} perspective")]
    MissingPerspective {
        concept_id: String,
        perspective: &'static str,
    },

    #[error("encoder id {0} appears more than once")]
    DuplicateEncoder(String),

    #[error("unknown concept label {0}")]
    UnknownLabel(String),

    #[error("gradient descent diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("normal equations are singular; use a ridge parameter greater than zero")]
    Singular,

    #[error("projection is the zero vector; attribution abstains")]
    Abstain,

    #[error("zero vector has no direction")]
    ZeroNorm,

    #[error("weights sum to {0}, expected 1")]
    Unnormalized(f64),

    #[error("attack kind {0} does not transform model updates")]
    UnsupportedAttack(&'static str),

    #[error("no client reported in round {0}")]
    NoReports(usize),

    #[error("client {client} failed: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("remote encoder: {0}")]
    Remote(String),

    #[error("config: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
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

    pub(crate) fn format(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.to_string(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
