use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("need at least {needed} points for k-means++ but got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("item {item_id} has weight {weight} above the capacity bound {bound} (layer {layer})")]
    ItemOverCapacity {
        layer: usize,
        item_id: u64,
        weight: f64,
        bound: f64,
    },

    #[error("cluster {cluster} at layer {layer} cannot be repaired: load {load} exceeds bound {bound}")]
    CapacityInfeasible {
        layer: usize,
        cluster: usize,
        load: f64,
        bound: f64,
    },

    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at batch {batch} (loss {loss})")]
    Diverged { batch: usize, loss: f64, trace: Vec<f64> },

    #[error("undefined probability: {0}")]
    Undefined(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
