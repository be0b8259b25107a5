use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid neuron parameters: {0}")]
    InvalidParams(String),

    #[error("time {t} overflows the z-domain for tau_i = {tau_i}")]
    TimeOverflow { t: f64, tau_i: f64 },

    #[error("kernel evaluated at negative time {0}")]
    NegativeTime(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("gradient tape does not belong to these weights (checksum {tape:#018x} != {weights:#018x})")]
    TapeMismatch { tape: u64, weights: u64 },

    #[error("non-finite gradient {value} at layer {layer}, index {index}")]
    NonFiniteGradient { layer: usize, index: usize, value: f64 },

    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated IDX payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unexpected IDX dimensions: {0}")]
    BadDimensions(String),

    #[error("pixel intensity {0} outside [0, 255]")]
    IntensityOutOfRange(f64),

    #[error("ODE oracle could not bracket a crossing near t = {0} at the refinement floor")]
    OdeRefinement(f64),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
