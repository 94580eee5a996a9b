//! Error type shared by every module of the crate.

use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// A vector or matrix had the wrong length for the operation.
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    /// An operation that needs at least one element received none.
    EmptyInput(&'static str),
    /// A model or config violated a structural invariant.
    InvalidConfig(String),
    /// A score fell outside the configured score range.
    ScoreOutOfRange {
        score: f64,
        min: f64,
        max: f64,
    },
    /// A bin index was out of range for the distribution it indexes.
    BinOutOfRange {
        bin: usize,
        n_bins: usize,
    },
    /// A sample file line could not be parsed or validated.
    Parse {
        line: usize,
        message: String,
    },
    /// Two samples in one set share an id.
    DuplicateId(String),
    /// Neighbor hits passed to profile construction were not sorted by distance.
    UnsortedHits,
    /// A prediction id has no matching truth sample.
    UnknownId(String),
    /// Backward was requested on a node that is not a scalar.
    LossNotScalar {
        len: usize,
    },
    /// The file is not a datastore (bad magic bytes).
    NotADatastore,
    /// The datastore file ended before the declared contents.
    TruncatedDatastore,
    /// The datastore file declares an unsupported format version.
    DatastoreVersion {
        found: u32,
    },
    Io(io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                context,
                expected,
                actual,
            } => write!(
                f,
                "{context}: dimension mismatch: expected {expected}, got {actual}"
            ),
            Error::EmptyInput(what) => write!(f, "{what}: empty input"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::ScoreOutOfRange { score, min, max } => {
                write!(f, "score {score} outside [{min}, {max}]")
            }
            Error::BinOutOfRange { bin, n_bins } => {
                write!(f, "bin {bin} out of range for {n_bins} bins")
            }
            Error::Parse { line, message } => write!(f, "line {line}: {message}"),
            Error::DuplicateId(id) => write!(f, "duplicate sample id {id:?}"),
            Error::UnsortedHits => write!(f, "neighbor hits are not sorted by distance"),
            Error::UnknownId(id) => write!(f, "prediction id {id:?} not found in truth set"),
            Error::LossNotScalar { len } => {
                write!(f, "loss node must be a scalar, got length {len}")
            }
            Error::NotADatastore => write!(f, "not a RAMP datastore"),
            Error::TruncatedDatastore => write!(f, "datastore file is truncated"),
            Error::DatastoreVersion { found } => {
                write!(f, "unsupported datastore version {found}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
