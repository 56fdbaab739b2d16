use thiserror::Error;

/// Errors raised by the compression, window and preconditioner layers.
#[derive(Debug, Error)]
pub enum EfcpError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("matrix is not symmetric: |a[{row},{col}] - a[{col},{row}]| = {gap:e}")]
    Asymmetric { row: usize, col: usize, gap: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("block structure mismatch: {0}")]
    BlockStructure(String),

    #[error("numerical breakdown: {0}")]
    Breakdown(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("run diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EfcpError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(EfcpError::Dimension {
            context,
            expected,
            actual,
        })
    }
}
