use alloc::boxed::Box;
use alloc::string::String;

use crate::training::LossReport;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("numerical blow-up at step {step} (t = {time} min)")]
    BlowUp { step: usize, time: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dataset too short: need {needed} observations, have {available}")]
    DatasetTooShort { needed: usize, available: usize },

    #[error("window starting at observation {window}: {source}")]
    Window { window: usize, source: Box<Error> },

    #[error("training diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        last: Option<LossReport>,
    },

    #[error("missing results cell: {0}")]
    MissingCell(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn in_window(self, window: usize) -> Self {
        Error::Window {
            window,
            source: Box::new(self),
        }
    }
}
