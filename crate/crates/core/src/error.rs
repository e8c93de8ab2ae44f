use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{path}:{line}: schema violation in field `{field}`: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("{path}:{line}: entity char span {char_start}..{char_end} does not align with token boundaries")]
    SpanAlignment {
        path: PathBuf,
        line: usize,
        char_start: usize,
        char_end: usize,
    },

    #[error("overlapping spans: {first:?} and {second:?}")]
    OverlappingSpans {
        first: (usize, usize),
        second: (usize, usize),
    },

    #[error("dimension mismatch{}: expected {expected}, found {found}", key_suffix(.key))]
    DimMismatch {
        expected: usize,
        found: usize,
        key: Option<String>,
    },

    #[error("non-finite value in embedding `{0}`")]
    NonFinite(String),

    #[error("duplicate embedding key `{0}`")]
    DuplicateKey(String),

    #[error("unknown embedding key `{0}`")]
    MissingKey(String),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("bad embedding file: {0}")]
    EmbeddingFormat(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid label id {label} (label count {count})")]
    InvalidLabel { label: usize, count: usize },

    #[error("not a probability distribution: {0}")]
    NotDistribution(String),

    #[error("span {start}..{end} out of range for {len} tokens")]
    SpanOutOfRange { start: usize, end: usize, len: usize },

    #[error("empty training set")]
    EmptyDataset,

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("transcript cache miss for request key {0}")]
    CacheMiss(String),

    #[error("http request failed after {attempts} attempt(s): {message}")]
    Http { attempts: u32, message: String },

    #[error("unparseable provider payload: {0}")]
    ProviderPayload(String),

    #[error("gateway misconfigured: {0}")]
    GatewayConfig(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("invalid selector config: {0}")]
    SelectorConfig(String),

    #[error("requested top-{k} from {available} candidates")]
    NotEnoughCandidates { k: usize, available: usize },

    #[error("sample id mismatch: {0}")]
    IdMismatch(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: String },

    #[error("artifact {path} was produced under config {found}, current config is {expected}")]
    ArtifactMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

fn key_suffix(key: &Option<String>) -> String {
    match key {
        Some(k) => format!(" at key `{k}`"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Transient failures worth retrying at the sample level.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Http { .. })
    }
}
