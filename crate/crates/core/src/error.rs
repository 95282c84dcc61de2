use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("index {index} out of range for {context} of length {len}")]
    Index {
        context: String,
        index: usize,
        len: usize,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("[{module}] {source}")]
    Module {
        module: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dimension(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            found,
        }
    }

    /// Tags the error with the module it surfaced from.
    pub fn in_module(self, module: &'static str) -> Self {
        match self {
            already @ Error::Module { .. } => already,
            other => Error::Module {
                module,
                source: Box::new(other),
            },
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Parse { .. }
            | Error::Schema(_)
            | Error::Io { .. }
            | Error::Dimension { .. }
            | Error::Index { .. }
            | Error::Empty(_) => ErrorKind::Data,
            Error::Numeric(_) | Error::Stage(_) => ErrorKind::Numeric,
            Error::Module { source, .. } => source.kind(),
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn in_module(self, module: &'static str) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn in_module(self, module: &'static str) -> Result<T> {
        self.map_err(|e| e.in_module(module))
    }
}
