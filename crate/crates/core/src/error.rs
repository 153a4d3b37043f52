use std::path::PathBuf;

use thiserror::Error;

use crate::network::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("network is malformed: {}", join_violations(.0))]
    InvalidNetwork(Vec<Violation>),

    #[error("input has {found} elements, expected {expected}")]
    InputShape { expected: usize, found: usize },

    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("value out of domain in {what}: {value}")]
    Domain { what: String, value: f64 },

    #[error("index out of range: {what} = {index}, bound {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("trace does not belong to this network: {0}")]
    TraceMismatch(String),

    #[error("invalid gating spec: {0}")]
    InvalidGating(String),

    #[error("path oracle needs {count} paths, above the cap of {cap}")]
    OracleTooLarge { count: u128, cap: u128 },

    #[error("path oracle supports only dense Affine/Gate networks: {0}")]
    OracleUnsupported(String),

    #[error("invalid path transition into layer {layer}: a unit cannot feed a bias coordinate")]
    InvalidTransition { layer: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("architectures differ: {0}")]
    ArchitectureMismatch(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid batch-norm statistics in channel {channel}: var + eps = {value}")]
    InvalidStatistics { channel: usize, value: f64 },

    #[error("container parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("array `{name}` declares {declared} bytes but {available} are available")]
    PayloadLength {
        name: String,
        declared: u64,
        available: u64,
    },

    #[error("array `{name}` has shape product {expected} but payload holds {found} elements")]
    ArrayShape {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("unsupported stage kind `{0}`")]
    UnsupportedStage(String),

    #[error("cannot render an empty grid")]
    EmptyGrid,

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
