use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient stream: {length} ticks available, at least {required} required")]
    InsufficientStream { length: u64, required: u64 },

    #[error("degenerate split: {train} train tasks and {test} test tasks")]
    DegenerateSplit { train: usize, test: usize },

    #[error("invalid stream: {0}")]
    InvalidStream(String),

    #[error("invalid task parameters: {0}")]
    InvalidTaskParams(String),

    #[error("rotation undefined for feature_dim {feature_dim} (need at least 2)")]
    RotationUndefined { feature_dim: usize },

    #[error("no segments in abrupt drift spec")]
    NoSegments,

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("singular normal equations: numerical rank {rank} < {dim} columns")]
    SingularNormalEquations { rank: usize, dim: usize },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid sample weights: {0}")]
    InvalidWeights(String),

    #[error("solver residual {residual:e} exceeds tolerance")]
    ResidualTooLarge { residual: f64 },

    #[error("stale factorization: data or weights changed since the solve")]
    StaleFactorization,

    #[error("underdetermined period fit: period starting at tick {period_start} has {samples} samples for {columns} columns")]
    UnderdeterminedPeriod {
        period_start: i64,
        samples: usize,
        columns: usize,
    },

    #[error("train window holds {available} complete periods, {required} required")]
    TooFewPeriods { available: usize, required: usize },

    #[error("non-finite logits from resampler")]
    NonFiniteLogits,

    #[error("non-finite loss on task at tick {task_time}")]
    NonFiniteLoss { task_time: i64 },

    #[error("training diverged at epoch {epoch} on task at tick {task_time}")]
    Divergence { epoch: usize, task_time: i64 },

    #[error("standard deviations must be positive (got {sigma1}, {sigma2})")]
    NonPositiveSigma { sigma1: f64, sigma2: f64 },

    #[error("empty input")]
    EmptyInput,

    #[error("zero normalizer")]
    ZeroNormalizer,

    #[error("undefined rank correlation: constant input")]
    UndefinedRankCorrelation,

    #[error("undefined ICIR: IC sequence has zero standard deviation")]
    UndefinedIcir,

    #[error("persistence RMSE must be positive")]
    ZeroPersistence,

    #[error("invalid forgetting spec: {0}")]
    InvalidForgetting(String),

    #[error("downstream model failure: {0}")]
    Downstream(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid parameter path `{0}`")]
    InvalidParamPath(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}
