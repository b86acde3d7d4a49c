use thiserror::Error;

/// Every failure the lab can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown state: {0}")]
    UnknownState(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid action space: {0}")]
    InvalidActionSpace(String),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("prompt too long: {prompt} tokens exceed truncation limit {limit}")]
    PromptTooLong { prompt: usize, limit: usize },
    #[error("ground truth does not extend the origin")]
    GroundTruthMismatch,

    #[error("unknown token {token} (vocabulary size {size})")]
    UnknownToken { token: usize, size: usize },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    EmbeddingDimMismatch { expected: usize, got: usize },
    #[error("backward requires scalar, got {rows}x{cols}")]
    BackwardRequiresScalar { rows: usize, cols: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unknown parameter: {0}")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("no target tokens")]
    NoTargetTokens,
    #[error("invalid mix: lambda {0} outside [0, 1]")]
    InvalidMix(f64),
    #[error("invalid loss config: {0}")]
    InvalidLossConfig(String),
    #[error("pair prompt mismatch")]
    PairPromptMismatch,
    #[error("reference required")]
    ReferenceRequired,
    #[error("raw losses required")]
    RawLossesRequired,

    #[error("grid parse error: {0}")]
    GridParse(String),
    #[error("multiple start cells")]
    MultipleStart,
    #[error("multiple gift cells")]
    MultipleGift,
    #[error("ragged rows: row {row} has {got} cells, expected {expected}")]
    RaggedRows { row: usize, got: usize, expected: usize },
    #[error("no path from start to gift")]
    NoPath,
    #[error("suboptimal path required for pairwise losses")]
    SuboptimalPathRequired,
    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: usize },

    #[error("spec infeasible: {0}")]
    SpecInfeasible(String),
    #[error("empty dataset")]
    EmptyDataset,

    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
