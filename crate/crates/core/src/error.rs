//! Error type shared across the crate.

use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Everything that can go wrong inside the core library.
///
/// Variants carry enough context to point at the offending input; IO and
/// config-file problems are the companion crate's business.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two vectors or matrices that must agree in size do not.
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// An operation received an empty collection it cannot work with.
    Empty(&'static str),
    /// Aggregation weights must be non-negative and sum to one.
    BadWeights { sum: f64 },
    /// A parameter is outside its documented range.
    InvalidParam {
        name: &'static str,
        reason: &'static str,
    },
    /// A value that must be finite is NaN or infinite.
    NonFinite { context: &'static str },
    /// Local training blew up; reported with the client and round so the run
    /// can be triaged from the log alone.
    Diverged {
        round: usize,
        client: usize,
        loss: f64,
    },
    /// A linear system was singular or too ill-conditioned to trust.
    SingularSystem { context: &'static str },
    /// Partitioning could not satisfy the requested shard sizes; names the
    /// class whose sample pool ran dry.
    InfeasiblePartition { class: usize },
    /// The operation does not apply to this model or data kind.
    Unsupported(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimMismatch {
                context,
                expected,
                got,
            } => write!(f, "{context}: expected dimension {expected}, got {got}"),
            Error::Empty(what) => write!(f, "{what} must not be empty"),
            Error::BadWeights { sum } => {
                write!(f, "aggregation weights must be non-negative and sum to 1 (sum = {sum})")
            }
            Error::InvalidParam { name, reason } => write!(f, "invalid {name}: {reason}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Diverged {
                round,
                client,
                loss,
            } => write!(
                f,
                "training diverged at round {round} on client {client} (loss = {loss:e})"
            ),
            Error::SingularSystem { context } => {
                write!(f, "{context}: linear system is singular or ill-conditioned")
            }
            Error::InfeasiblePartition { class } => {
                write!(f, "partition infeasible: sample pool for class {class} exhausted")
            }
            Error::Unsupported(what) => write!(f, "unsupported operation: {what}"),
        }
    }
}

impl core::error::Error for Error {}
