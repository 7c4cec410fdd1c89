use thiserror::Error;

/// Errors raised by the library.
///
/// The variants are grouped so that callers (the CLI in particular) can map
/// them onto usage, data, and numeric failure classes.
#[derive(Debug, Error)]
pub enum Error {
    /// Input has the wrong shape (too few locations, empty file, ...).
    #[error("structural error: {0}")]
    Structure(String),

    /// A value lies outside the support or parameter space.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller-supplied argument is invalid (length mismatch, zero factor, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A computation produced no usable number.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite density in track {track}, t = {t}, state {state}")]
    NonFiniteDensity {
        track: usize,
        t: usize,
        state: usize,
    },

    /// Every optimizer start failed; the message carries per-start diagnostics.
    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Argument(_) => ErrorClass::Usage,
            Error::Structure(_)
            | Error::Domain(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorClass::Data,
            Error::Numeric(_) | Error::NonFiniteDensity { .. } | Error::Estimation(_) => {
                ErrorClass::Numeric
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
