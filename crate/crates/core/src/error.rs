use thiserror::Error;

/// Error type shared across the crate. Variants map onto the harness exit
/// codes: `InvalidConfig`/`InvalidInput`/`Incompatible` are caller mistakes,
/// `Divergence` is a run that produced non-finite losses, and `Integrity` is
/// a corrupted or truncated artifact.
#[derive(Debug, Error)]
pub enum DmrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Not enough per-combination statistics to pick a hard set.
    #[error("insufficient statistics: {0}")]
    InsufficientStats(String),

    /// A channel vector with zero norm cannot be direction-compared.
    #[error("degenerate channel: {0}")]
    DegenerateChannel(String),

    /// Metric is undefined on the given inputs (e.g. ACER with one class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training produced a non-finite loss; the report names the step.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    /// Checksum mismatch or malformed archive bytes.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Checkpoint and requested configuration do not describe the same run.
    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DmrError>;
