use std::path::PathBuf;

use thiserror::Error;

use crate::model::{Score, Section};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid guideline: section `{0}` must not be empty")]
    InvalidGuideline(Section),
    #[error("invalid score scale: {0}")]
    InvalidScale(String),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("backend rejected request (status {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("empty input")]
    EmptyInput,
    #[error("unrecognized prompt shape")]
    UnrecognizedPrompt,
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("grader output unparseable after {attempts} attempt(s): {last:?}")]
    Unparseable { attempts: usize, last: String },
    #[error("completion missing <START>/<END> delimiters after {attempts} attempt(s)")]
    MissingDelimiters { attempts: usize },
    #[error("reflection requires at least one error case")]
    NoErrors,
    #[error("template `{name}` is missing placeholder {placeholder}")]
    Template { name: String, placeholder: String },
    #[error("reading template {path}: {source}")]
    TemplateIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("sample {0} has no full category distribution")]
    MissingDistribution(String),
    #[error("batch size {size} exceeds dataset size {available}")]
    SizeExceedsDataset { size: usize, available: usize },
    #[error("sample {0} has no embedding")]
    MissingEmbedding(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("length mismatch: {preds} predictions vs {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("empty input")]
    EmptyInput,
}

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: label {label} is not in the score scale")]
    UnknownLabel { line: usize, label: Score },
    #[error("line {line}: question id `{found}` differs from `{expected}`")]
    MixedQuestions {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("sample `{0}` has no label but is required for optimization")]
    MissingLabel(String),
    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("{what} hash mismatch: run was created with {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

/// Crate-level error for the pipelines that span modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Workbench(#[from] WorkbenchError),
    #[error("evaluation invalid: {failed} of {total} samples failed; first error: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
