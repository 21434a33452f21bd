//! Crate-level error type.
//!
//! Every module has its own error enum; [`Error`] unifies them so callers
//! (the CLI in particular) can classify a failure without matching on every
//! variant.

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::harness::HarnessError;
use crate::metrics::MetricsError;
use crate::probe::ProbeError;
use crate::steer::SteerError;
use crate::toylm::ModelError;

/// Broad failure class, used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Steer(#[from] SteerError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) => ErrorKind::Io,
            Error::Model(ModelError::Io(_)) | Error::Steer(SteerError::Io(_)) => ErrorKind::Io,
            Error::Model(ModelError::Diverged { .. })
            | Error::Probe(ProbeError::NotConverged { .. }) => ErrorKind::Numerical,
            Error::Harness(HarnessError::Model(ModelError::Diverged { .. })) => {
                ErrorKind::Numerical
            }
            _ => ErrorKind::Validation,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
