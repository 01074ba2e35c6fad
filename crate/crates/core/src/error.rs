use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown region id `{0}`")]
    UnknownRegion(String),

    #[error("duplicate region id `{0}`")]
    DuplicateRegion(String),

    #[error("region `{id}` has non-positive population {population}")]
    InvalidPopulation { id: String, population: f64 },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("{what}: declared rank deficiency {declared} but numerical rank deficiency is {numerical}")]
    RankMismatch {
        what: String,
        declared: usize,
        numerical: usize,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("variogram fit failed: {0}")]
    FitFailed(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("degenerate polygon for region `{0}`")]
    DegeneratePolygon(String),

    #[error("covariate coverage: {0}")]
    Coverage(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("covariate `{0}` has zero variance")]
    ZeroVariance(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("inconsistent inputs: {0}")]
    Mismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sampler diverged in block `{block}` at iteration {iteration} of chain {chain}")]
    Divergence {
        block: String,
        chain: usize,
        iteration: usize,
    },

    #[error("constraint violation in block `{block}`: |A x| = {residual:e}")]
    ConstraintViolation { block: String, residual: f64 },

    #[error("too few draws: need at least {needed}, got {got}")]
    TooFewDraws { needed: usize, got: usize },

    #[error("model {0} does not include the effects required for this output")]
    UnsupportedModel(u8),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
