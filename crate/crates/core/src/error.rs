//! Error types shared across the pipeline.

use thiserror::Error;

/// Errors raised by schema construction and validation.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("unknown entity type code `{0}`")]
    UnknownEntityType(String),
    #[error("unknown relation type code `{0}`")]
    UnknownRelationType(String),
    #[error("unknown modality code `{0}`")]
    UnknownModality(String),
    #[error("entity type set must be non-empty")]
    EmptyEntitySet,
    #[error("modality set must be non-empty")]
    EmptyModalitySet,
    #[error("duplicate declaration `{0}`")]
    Duplicate(String),
    #[error("config line {line}: {message}")]
    BadConfigLine { line: usize, message: String },
    #[error("relation `{relation}` declared as {declared} but is {actual}")]
    CategoryMismatch {
        relation: String,
        declared: String,
        actual: String,
    },
}

/// Position of a parse failure in the annotated source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourcePos {
    /// 1-based line.
    pub line: usize,
    /// 1-based column, counted in characters.
    pub column: usize,
}

impl std::fmt::Display for SourcePos {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

/// Errors raised while parsing or validating annotated reports.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("{pos}: malformed markup: {message}")]
    Malformed { pos: SourcePos, message: String },
    #[error("{pos}: duplicate entity id {id}")]
    DuplicateId { pos: SourcePos, id: u32 },
    #[error("{pos}: relation target id {id} does not resolve to an entity")]
    DanglingTarget { pos: SourcePos, id: u32 },
    #[error("{pos}: entity spans overlap")]
    OverlappingSpans { pos: SourcePos },
    #[error("{pos}: entity span does not align with token boundaries")]
    SpanMisaligned { pos: SourcePos },
    #[error("schema violations: {0}")]
    SchemaViolations(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("document invariant violated: {0}")]
    Invariant(String),
}

/// Errors raised when serializing a document back to markup.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SerializeError {
    #[error("document invariant violated: {0}")]
    Invariant(String),
}

/// Errors raised by encoder construction and inference.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("token index {index} out of range for vocabulary of size {vocab_size}")]
    IndexOutOfRange { index: usize, vocab_size: usize },
    #[error("no precomputed vector for doc `{doc_id}` token {token_index}")]
    MissingVector { doc_id: String, token_index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("empty entity span")]
    EmptySpan,
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("tag index {0} out of range")]
    TagOutOfRange(usize),
    #[error("gold tag sequence contains a structurally illegal transition at position {0}")]
    IllegalGoldTransition(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Errors raised by the training harness.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least {folds} distinct patients for {folds}-fold split, got {patients}")]
    TooFewPatients { folds: usize, patients: usize },
    #[error("fold count must be at least 2, got {0}")]
    BadFoldCount(usize),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("subset fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// Errors raised by evaluation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("prediction and gold corpora are misaligned: {0}")]
    Misaligned(String),
}

/// Errors raised loading or saving checkpoint bundles.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint component {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("schema fingerprint mismatch: checkpoint {found}, expected {expected}")]
    FingerprintMismatch { found: String, expected: String },
    #[error("checkpoint is for stage {found}, expected {expected}")]
    StageMismatch { found: String, expected: String },
}
