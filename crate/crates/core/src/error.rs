use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("unknown word {word:?} is not in the vocabulary")]
    Vocabulary { word: String },
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("freeze violation: {0}")]
    FreezeViolation(String),
    #[error("could not parse sentence {sentence:?}")]
    Extraction { sentence: String },
    #[error("QA transport error: {0}")]
    Transport(String),
    #[error("non-conforming QA answer {0:?} (expected yes or no)")]
    MalformedAnswer(String),
    #[error("undefined region: {0}")]
    UndefinedRegion(String),
    #[error("degenerate attention trace: text and image mass are both zero")]
    DegenerateTrace,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("missing artifact {path}; produce it with `dcppd {producer}`")]
    MissingArtifact { path: String, producer: String },
    #[error("refusing to overwrite existing run output {0}")]
    RunExists(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
