use thiserror::Error;

/// Errors produced anywhere in the compression pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed cube header: {0}")]
    Header(String),

    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("non-finite value at pixel {pixel}, time {time}")]
    NonFinite { pixel: usize, time: usize },

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("half-spectrum is not conjugate symmetric (relative imaginary residue {0:e})")]
    ImaginaryResidue(f64),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:e}, last iterate {last:?})")]
    NoConvergence {
        iterations: usize,
        grad_norm: f64,
        last: [f64; 3],
    },

    #[error("matrix is not positive definite at pivot {pivot}")]
    NotPositiveDefinite { pivot: usize },

    #[error("degenerate triangle {0}")]
    DegenerateTriangle(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("budget infeasible: model needs {needed} numbers but only {available} fit")]
    BudgetInfeasible { needed: f64, available: f64 },

    #[error("index stream: {0}")]
    IndexCodec(String),

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("unsupported archive version {0}")]
    Version(u16),

    #[error("generator spec: {0}")]
    Spec(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
