use crate::certificate::Certificate;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain mismatch between operands")]
    DomainMismatch,
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("empty set: {0}")]
    EmptySet(&'static str),
    #[error("slab too thin: separation {gap} below required {required}")]
    SlabTooThin { gap: f64, required: f64 },
    #[error("argument out of range: {0}")]
    OutOfRange(String),
    #[error("matrix not in the admissible set: {0}")]
    NotInMatrixSet(String),
    #[error("matrix outside the chart ball: distance {distance} not below {radius}")]
    OutsideChart { distance: f64, radius: f64 },
    #[error("set volume {volume} below delta {delta}")]
    VolumeBelowDelta { volume: f64, delta: f64 },
    #[error("certificate failed: {}", .0.failures().join("; "))]
    Certificate(Box<Certificate>),
    #[error("precondition rejected: {0}")]
    Rejected(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("overlap region has zero volume")]
    EmptyOverlap,
    #[error("point is not on a two-label face: {0}")]
    NotJumpPoint(String),
    #[error("set is not face-connected")]
    Disconnected,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
