//! Error types shared across the library.
//!
//! Two families matter to callers: input-shaped problems (bad files, bad
//! configs, contract violations on arguments) and runtime-shaped problems
//! (non-finite numbers, degenerate vectors, infeasible budgets). The CLI maps
//! the former to exit code 1 and the latter to exit code 2 via
//! [`Error::exit_code`].

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures while reading an encoder checkpoint. Each corruption class is a
/// distinct variant so callers (and tests) can tell them apart.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic: expected \"STXT\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("version mismatch: file has {found}, reader supports {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
}

#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed us something unusable: empty batch, unknown config key,
    /// missing file, n larger than the population, ...
    #[error("input error: {0}")]
    Input(String),

    /// Tensor/parameter dimensions disagree; message names both shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// A vector that must be nonzero (cosine metrics, perturbations) is zero.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Perturbation budget cannot be met (direction-only requires c <= 2|e|).
    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    /// NaN/Inf or another numerical failure at runtime.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Process exit code the CLI should use for this error: 1 for
    /// input/config problems, 2 for runtime/numerical problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Shape(_) | Error::Io(_) | Error::Config(_) => 1,
            Error::Checkpoint(_) => 1,
            Error::Degenerate(_) | Error::InfeasibleBudget(_) | Error::Numeric(_) => 2,
        }
    }
}
