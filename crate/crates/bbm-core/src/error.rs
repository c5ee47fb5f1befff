use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Inputs outside the admissible parameter region.
    #[error("domain error: {0}")]
    Domain(String),

    /// A time or index argument outside its valid range.
    #[error("range error: {0}")]
    Range(String),

    /// The live particle count passed the configured cap.
    #[error("population cap exceeded: more than {0} particles")]
    PopulationCapExceeded(usize),

    #[error("unknown particle id {0}")]
    UnknownParticle(u32),

    #[error("time {t} outside segment [{lo}, {hi}]")]
    TimeOutsideSegment { t: f64, lo: f64, hi: f64 },

    #[error("empty level set")]
    EmptyLevelSet,

    /// First-passage level is nonnegative, so the passage is immediate and
    /// the tilted estimator is vacuous.
    #[error("degenerate level {0} (must be < 0)")]
    DegenerateLevel(f64),

    #[error("insufficient tail: {0}")]
    InsufficientTail(String),

    #[error("empty sample")]
    EmptySample,
}

pub type Result<T> = std::result::Result<T, Error>;
