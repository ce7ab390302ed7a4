use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("training error in `{name}`: {reason}")]
    Training { name: String, reason: String },

    #[error("timestep {t} outside 1..={t_max}")]
    Domain { t: usize, t_max: usize },

    #[error("composition error: {0}")]
    Composition(String),

    #[error("sampling produced a non-finite value at DDIM step {step} (t={t})")]
    Sampling { step: usize, t: usize },

    #[error("task error: {0}")]
    Task(String),

    #[error("episode error: {0}")]
    Episode(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error after peeling context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Configuration-class errors map to CLI exit code 2, everything else to 3.
    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config(_) | Error::Task(_))
    }
}
