use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid reach {index}: {reason}")]
    InvalidReach { index: usize, reason: String },
    #[error("coalition {members:?} is not a block of the partition")]
    NotInPartition { members: Vec<usize> },
    #[error("gain synthesis failed for coalition {members:?}: {source}")]
    Synthesis {
        members: Vec<usize>,
        #[source]
        source: NumericsError,
    },
    #[error("setpoint system singular for coalition {members:?}: {source}")]
    Setpoint {
        members: Vec<usize>,
        #[source]
        source: NumericsError,
    },
    #[error("{what} problem infeasible for coalition {members:?}")]
    Infeasible { what: &'static str, members: Vec<usize> },
    #[error("controller failure at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("configuration parse error: {0}")]
    Parse(String),
    #[error("trace schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
