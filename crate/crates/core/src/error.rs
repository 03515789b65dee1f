use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ParError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ParError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A line of a JSON-lines file failed to parse or did not match the schema.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A record parsed but violated a data-model invariant.
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error("document {doc_id}, event {event_index}: {message}")]
    MalformedEvent {
        doc_id: String,
        event_index: usize,
        message: String,
    },

    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    /// The instance cannot be scored (e.g. its document has no candidates).
    #[error("instance skipped: {0}")]
    InstanceSkip(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} hash mismatch: expected {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    /// An error raised while reading or writing `path`.
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<ParError>,
    },

    /// Bad command-line usage, such as a missing input file.
    #[error("{0}")]
    Usage(String),
}

impl ParError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ParError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a file path unless the error already names one.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        match self {
            e @ (ParError::Io { .. } | ParError::Checkpoint { .. } | ParError::InFile { .. }) => e,
            e => ParError::InFile {
                path: path.into(),
                source: Box::new(e),
            },
        }
    }

    pub fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        ParError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            ParError::Usage(_) => 1,
            ParError::InFile { source, .. } => source.exit_code(),
            ParError::Parse { .. }
            | ParError::Validation { .. }
            | ParError::MalformedEvent { .. }
            | ParError::Config(_)
            | ParError::HashMismatch { .. } => 2,
            _ => 3,
        }
    }
}
