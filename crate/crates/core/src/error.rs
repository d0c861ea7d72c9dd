use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown op kind `{0}`")]
    UnknownOpKind(String),

    #[error("op `{op}` references unknown tensor `{tensor}`")]
    DanglingTensor { op: String, tensor: String },

    #[error("op `{op}`: shape mismatch: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("cycle detected through op `{0}`")]
    Cycle(String),

    #[error("op `{op}` consumes `{tensor}` before it is produced")]
    NotTopological { op: String, tensor: String },

    #[error("tensor `{0}` is produced by more than one op")]
    MultipleProducers(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension {dim} of extent {extent} is not divisible by {parts}")]
    Indivisible {
        dim: usize,
        extent: usize,
        parts: usize,
    },

    #[error("dimension {dim} out of range for rank {rank}")]
    DimOutOfRange { dim: usize, rank: usize },

    #[error("cut count mismatch: expected {expected}, got {got}")]
    CutCountMismatch { expected: usize, got: usize },

    #[error("invalid tiling `{0}`")]
    InvalidTiling(String),

    #[error("assignment has no tiling for tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{tensor}` (role {role}) has no dimension {dim} for the preset")]
    MissingPresetDim {
        tensor: String,
        role: String,
        dim: usize,
    },

    #[error("op `{0}` has no feasible aligned form for the given shapes")]
    NoAlignedForm(String),

    #[error("no feasible tiling for tensor `{0}`")]
    NoFeasibleTiling(String),

    #[error("search space of {size} assignments exceeds the guard of {limit}")]
    SearchSpaceExceeded { size: u128, limit: u128 },

    #[error("tensor of {size} elements exceeds the enumeration guard of {limit}")]
    SizeGuard { size: usize, limit: usize },

    #[error("device count {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("hierarchy depth {depth} does not match cut count {k}")]
    DepthMismatch { depth: usize, k: usize },

    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),

    #[error("unknown device {0}")]
    UnknownDevice(usize),

    #[error("unbound function for op `{0}`")]
    UnboundFunction(String),

    #[error("plan execution failed: {0}")]
    Execution(String),

    #[error("unknown format `{0}`")]
    UnknownFormat(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Malformed(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
