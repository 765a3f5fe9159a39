use std::io;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate reference: norm of the reference is zero on the evaluated region")]
    DegenerateReference,

    #[error("non-finite value in iterate at step {step}")]
    NonFinite { step: usize },

    #[error("division by zero bound: {0}")]
    DegenerateBound(String),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Divergence {
        iteration: usize,
        loss: f64,
        /// losses recorded up to and including the divergent one
        trace: Vec<f64>,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
