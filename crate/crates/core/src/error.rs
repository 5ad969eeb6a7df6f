use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("sequence of length {len} is shorter than the widest kernel ({width})")]
    SequenceTooShort { len: usize, width: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("tape usage error: {0}")]
    Tape(&'static str),
    #[error("non-finite loss at epoch {epoch}, step {step} (cls={cls}, inter={inter}, intra={intra})")]
    NonFinite {
        epoch: usize,
        step: usize,
        cls: f64,
        inter: f64,
        intra: f64,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
