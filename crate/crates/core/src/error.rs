use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("box {0} lies outside the {1}x{2} frame")]
    OutOfFrame(String, f64, f64),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate grid: side {0} (need at least 2)")]
    DegenerateGrid(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("token budget admits no visual tokens: {0}")]
    Infeasible(String),

    #[error("referring arity mismatch: {placeholders} placeholder(s), {prompts} visual prompt(s)")]
    ReferringArity { placeholders: usize, prompts: usize },

    #[error("loss mask selects no positions")]
    EmptyLoss,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sequence length {len} exceeds context limit {limit}")]
    Length { len: usize, limit: usize },

    #[error("unknown training stage {0}")]
    UnknownStage(u8),

    #[error("stage ordering violated: {0}")]
    StageOrder(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
