use thiserror::Error;

/// Errors produced by the width-search engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layer spec: {0}")]
    InvalidLayer(String),

    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("width {width} is not on the grid of layer {layer}")]
    OffGrid { layer: usize, width: usize },

    #[error("width vector has {got} entries, space has {expected} layers")]
    WidthLength { expected: usize, got: usize },

    #[error("tied layers {a} and {b} carry different widths")]
    TieViolation { a: usize, b: usize },

    #[error("flops table has no entry for layer {layer} at ({c_in}, {c_out})")]
    MissingFlopsEntry { layer: usize, c_in: usize, c_out: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite gradient in parameter block {block}")]
    NonFiniteGradient { block: usize },

    #[error("training diverged (non-finite loss) at width {width}")]
    Divergence { width: String },

    #[error("budget {budget} is infeasible; minimum attainable is {minimum}")]
    InfeasibleBudget { budget: u64, minimum: u64 },

    #[error("sampling acceptance too low: {accepted} accepted out of {draws} draws")]
    LowAcceptance { accepted: usize, draws: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("correlation undefined: {0}")]
    Undefined(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("space too large to enumerate: {size} widths exceeds guard {guard}")]
    SpaceTooLarge { size: u128, guard: u128 },

    #[error("space mismatch: {0}")]
    SpaceMismatch(String),

    #[error("artifact {artifact} belongs to run {found}, expected {expected}")]
    MixedRun {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
