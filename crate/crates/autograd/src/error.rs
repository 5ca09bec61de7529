use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph")]
    GraphConsumed,
    #[error("eigengap {gap:e} between the two smallest eigenvalues is too small to differentiate")]
    EigengapTooSmall { gap: f64 },
    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps")]
    SolverFailure { sweeps: usize },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, AutogradError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(AutogradError::ShapeMismatch {
        op,
        detail: detail.into(),
    })
}
