use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library. Validation failures carry enough context to
/// name the offending value.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("token {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: u32, size: usize },

    #[error("sequence length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("distribution is not normalized: mass sums to {total}")]
    NotNormalized { total: f64 },

    #[error("negative probability mass {mass}")]
    NegativeMass { mass: f64 },

    #[error("coupling weights sum to {total}, expected 1")]
    CouplingInvalid { total: f64 },

    #[error("scheduler invalid at t={t}, position {position}: {reason}")]
    SchedulerInvalid {
        t: usize,
        position: usize,
        reason: String,
    },

    #[error("path component {component} is not a PMF at position {position} (sum {sum})")]
    ComponentInvalid {
        component: usize,
        position: usize,
        sum: f64,
    },

    #[error("timestep {t} out of range for horizon {horizon}")]
    TimeOutOfRange { t: usize, horizon: usize },

    #[error("instance too large to enumerate: {states} states exceeds {limit}")]
    InstanceTooLarge { states: f64, limit: usize },

    #[error("velocity yields negative transition mass {mass} at position {position}")]
    InvalidVelocity { position: usize, mass: f64 },

    #[error("state has zero probability mass ({mass}); velocity undefined there")]
    ZeroMassState { mass: f64 },

    #[error("cluster {cluster} has zero mass ({mass}) at the queried state")]
    ZeroClusterMassAtState { cluster: usize, mass: f64 },

    #[error("prefix length {prefix} exceeds sequence length {len}")]
    PrefixTooLong { prefix: usize, len: usize },

    #[error("target distribution puts mass on a sequence containing the mask token")]
    MaskInTarget,

    #[error("velocity is active at more than one position: {positions:?}")]
    NotOneSparse { positions: Vec<usize> },

    #[error("invalid cluster partition: {0}")]
    InvalidPartition(String),

    #[error("router weights invalid: {0}")]
    InvalidWeights(String),

    #[error("invalid router config: {0}")]
    InvalidRouterConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("feature vector is zero")]
    ZeroFeatureVector,

    #[error("top-k value {k} outside [1, {clusters}]")]
    BadK { k: usize, clusters: usize },

    #[error("no positive-weight expert has seen the prefix context")]
    EmptyPrefixDistribution,

    #[error("feature row {id:?} has zero norm")]
    ZeroVector { id: String },

    #[error("too few items: {items} items for {clusters} clusters")]
    TooFewItems { items: usize, clusters: usize },

    #[error("shard is empty")]
    EmptyShard,

    #[error("evaluation corpus is empty")]
    EmptyCorpus,

    #[error("context {context:?} never observed and smoothing is zero")]
    UnseenContext { context: Vec<u32> },

    #[error("model file corrupt: {0}")]
    CorruptModel(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("malformed input {path:?}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("check {check:?} failed: {source}")]
    CheckFailed {
        check: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config or files) rather than
    /// by a failing numerical check.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::ConfigInvalid(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_)
            | Error::CorruptModel(_) => true,
            Error::CheckFailed { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}
