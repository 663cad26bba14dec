use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("need at least {needed} vectors, got {got}")]
    NotEnoughData { needed: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("normal matrix is singular; pass a ridge > 0")]
    Singular,

    #[error("code index {index} out of range for codebook size {codebook_size}")]
    CodeOutOfRange { index: u32, codebook_size: usize },

    #[error("step {step} out of range for a model with {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("activation cache does not belong to this step ({0})")]
    CacheMismatch(&'static str),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
