use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// What went wrong while decoding a binary artifact (clip container or
/// checkpoint). Kept as a separate enum so callers can distinguish a file
/// that is not ours at all from one that is ours but damaged.
#[derive(Debug, PartialEq, Eq)]
pub enum FormatErrorKind {
    /// Leading magic bytes did not match.
    BadMagic,
    /// Magic matched but the version field is one we do not read.
    UnsupportedVersion(u32),
    /// File ended before the declared payload was complete.
    Truncated { expected: u64, found: u64 },
    /// Dtype tag or a structural field holds a value we do not understand.
    Corrupt(String),
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatErrorKind::BadMagic => write!(f, "bad magic bytes"),
            FormatErrorKind::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            FormatErrorKind::Truncated { expected, found } => {
                write!(f, "truncated: expected {expected} bytes, found {found}")
            }
            FormatErrorKind::Corrupt(msg) => write!(f, "corrupt: {msg}"),
        }
    }
}

/// Unified error type for the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown parameter '{0}'")]
    MissingParam(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {}: {kind}", path.display())]
    Format { path: PathBuf, kind: FormatErrorKind },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// Convenience constructor for shape errors.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Convenience constructor for IO errors carrying the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Convenience constructor for format errors.
    pub fn format(path: impl Into<PathBuf>, kind: FormatErrorKind) -> Self {
        Error::Format { path: path.into(), kind }
    }
}
