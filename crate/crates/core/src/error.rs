use thiserror::Error;

/// Errors raised while reading or writing `AGMTRACE` files.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: unsupported trace format {format:?} version {version}")]
    Version { line: usize, format: String, version: u64 },
    #[error("line {line}: invalid spec: {reason}")]
    InvalidSpec { line: usize, reason: String },
    #[error("line {line}: dimension mismatch in `{field}`: expected {expected} values, found {found}")]
    Dimension { line: usize, field: &'static str, expected: usize, found: usize },
    #[error("line {line}: malformed base64 in `{field}`: {source}")]
    Base64 { line: usize, field: &'static str, source: base64::DecodeError },
    #[error("line {line}: `{field}` is not a whole number of binary32 values ({bytes} bytes)")]
    Misaligned { line: usize, field: &'static str, bytes: usize },
    #[error("truncated trace: {0}")]
    Truncated(String),
    #[error("line {line}: malformed record: {source}")]
    Malformed { line: usize, source: serde_json::Error },
    #[error("line {line}: invalid value in `{field}`: {reason}")]
    InvalidValue { line: usize, field: &'static str, reason: String },
}

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,
    #[error("not a distribution: {0}")]
    NotADistribution(String),
    #[error("degenerate vocabulary: need at least 2 entries, got {0}")]
    DegenerateVocabulary(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("model fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("trace exhausted at step {0}")]
    TraceExhausted(usize),
    #[error("replay detection requires a model source")]
    MissingModelSource,
    #[error("empty token sequence")]
    EmptySequence,
    #[error("unknown ablation variant {0:?}")]
    UnknownVariant(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
