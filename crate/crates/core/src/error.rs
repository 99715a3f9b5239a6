use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("time {t} is not a point of the simulation grid")]
    GridMismatch { t: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("index set with p = {order}, M_d = {slots} has {cardinality} elements, above the cap of {cap}")]
    IndexSetTooLarge {
        order: u32,
        slots: usize,
        cardinality: u128,
        cap: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix decomposition failed: {0}")]
    Decomposition(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("mesh {mesh} violates |pi| < 1/[g]_L with [g]_L = {lipschitz}")]
    IllPosedMesh { mesh: f64, lipschitz: f64 },

    #[error("training diverged at time step {step}: {detail}")]
    TrainingDiverged { step: usize, detail: String },

    #[error("index set mismatch: {0}")]
    IndexSetMismatch(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.into(),
        reason: reason.into(),
    }
}
