use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot amplitude-encode a zero vector")]
    ZeroVector,

    #[error("vector of length {len} does not fit into {n_qubits} qubits")]
    DimensionTooLarge { len: usize, n_qubits: usize },

    #[error("qubit index {index} out of range for a {n_qubits}-qubit register")]
    IndexOutOfRange { index: usize, n_qubits: usize },

    #[error("invalid gate: {0}")]
    InvalidGate(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("projection onto |0..0> has squared norm {norm_sq:e}, below 1e-12")]
    DegenerateProjection { norm_sq: f64 },

    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLengthMismatch { expected: usize, got: usize },

    #[error("normalized reward {0} is outside [0, 1]")]
    RewardOutOfRange(f64),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("objective returned a non-finite value at evaluation {eval}")]
    NonFiniteObjective { eval: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("lift dimension must be 0 or at least 3, got {0}")]
    BadLiftDim(usize),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("not a metric: {0}")]
    NotAMetric(String),

    #[error("evaluation grids differ: {0}")]
    GridMismatch(String),

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_sample(index: usize, source: Error) -> Self {
        Error::Sample {
            index,
            source: Box::new(source),
        }
    }
}
