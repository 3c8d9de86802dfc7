use thiserror::Error;

pub type Result<T, E = MmrlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MmrlError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} outside range {lo}..={hi} ({what})")]
    Range {
        what: &'static str,
        index: usize,
        lo: usize,
        hi: usize,
    },

    #[error("attention mask row {row} has no allowed position")]
    DegenerateMask { row: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("sequence of length {len} plus {extra} representation tokens exceeds capacity {capacity}")]
    Capacity { len: usize, extra: usize, capacity: usize },

    #[error("numeric domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("finite-difference oracle failed at parameter `{param}` entry {entry}: non-finite loss")]
    Oracle { param: String, entry: usize },

    #[error("non-finite loss term `{term}` at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("gradient check failed: parameter `{param}` relative error {error:.3e} exceeds {tolerance:.1e}")]
    GradientMismatch { param: String, error: f64, tolerance: f64 },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
