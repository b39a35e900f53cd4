use thiserror::Error;

/// Errors shared across the crate.
///
/// `NonFinite` doubles as the gradient-explosion diagnostic: any op that
/// produces a NaN or Inf aborts the current step with this error, and the
/// training loops count those aborts as explosion events instead of crashing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} produced non-finite values (gradient explosion?)")]
    NonFinite { op: &'static str },

    #[error("{what}: {why}")]
    InvalidArgument { what: &'static str, why: String },

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("timestep {t} out of range [0, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("shortcut span ({from} -> {to}) is not part of the segment plan")]
    SpanNotInPlan { from: usize, to: usize },

    #[error("adapter set {set:?} is not a contiguous stack prefix")]
    InvalidAdapterStack { set: Vec<usize> },

    #[error("timestep {t} is not on the denoising chain")]
    TimestepNotOnChain { t: usize },

    #[error("config error in {path}: {why}")]
    Config { path: String, why: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing phase output: {phase} (run `{phase}` before this phase)")]
    MissingPhase { phase: &'static str },

    #[error("output already exists at {path}; pass --force to overwrite")]
    WouldOverwrite { path: String },

    #[error("critic accuracy {acc:.3} below usable floor {floor:.2}")]
    CriticUnusable { acc: f64, floor: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
