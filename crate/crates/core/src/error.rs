use thiserror::Error;

/// Errors raised while validating geometry and domain types.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("antenna array must contain at least one antenna")]
    EmptyArray,
    #[error("antennas {0} and {1} share the same position")]
    DuplicateAntenna(usize, usize),
    #[error("wavelength {wavelength} m inconsistent with carrier {carrier_hz} Hz")]
    WavelengthMismatch { wavelength: f64, carrier_hz: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
}

/// Errors raised by the CSI container reader/writer. Every decode error names
/// the byte offset at which it was detected.
#[derive(Debug, Error)]
pub enum CsiIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte {offset}: expected \"CSIR\"")]
    BadMagic { offset: u64 },
    #[error("unsupported version {version} at byte {offset}")]
    UnsupportedVersion { offset: u64, version: u32 },
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: u64, reason: String },
    #[error("truncated payload at byte {offset}: needed {needed} bytes, found {found}")]
    Truncated { offset: u64, needed: usize, found: usize },
    #[error("dimension mismatch at byte {offset}: {reason}")]
    DimensionMismatch { offset: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("I/Q phase undefined: cos(n_f * eps_t) vanishes at subcarrier {n_f}")]
    CosineSingularity { n_f: usize },
    #[error("need at least {needed} {what}, got {got}")]
    NotEnoughData { what: &'static str, needed: usize, got: usize },
    #[error("regression did not converge after {iterations} iterations (best residual {residual})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: crate::calibration::FrequencyErrors,
    },
    #[error("antenna {antenna}: residual phasor sum is zero, offset undefined")]
    UndefinedOffset { antenna: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackingError {
    #[error("matching function undefined: total CSI amplitude is zero")]
    ZeroAmplitude,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CbcsError {
    #[error("measurement vector has zero energy")]
    ZeroInput,
    #[error("measurement length {got} does not match dictionary rows {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("posterior system is singular")]
    Singular,
    #[error("empty active set")]
    EmptyActiveSet,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("innovation covariance is not invertible")]
    SingularInnovation,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("timestamp misalignment: track frame at {track_t} s has no truth frame within {tolerance} s")]
    Misaligned { track_t: f64, tolerance: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

/// A pipeline stage failure, tagged with the stage that produced it.
#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {message}")]
pub struct StageError {
    pub stage: &'static str,
    pub message: String,
}

impl StageError {
    pub fn new(stage: &'static str, err: impl std::fmt::Display) -> Self {
        Self {
            stage,
            message: err.to_string(),
        }
    }
}
