use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
///
/// Variants group into three families that the command-line front end maps
/// onto exit codes: usage (1), data (2), and numerical (3).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate curvature: {0}")]
    DegenerateCurvature(String),

    #[error("lookup error: unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("state error: {0}")]
    State(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("config error: missing required key `{0}`")]
    MissingKey(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// Process exit code for this error: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::MissingKey(_) | Error::Usage(_) => 1,
            Error::Numerical(_) | Error::DegenerateCurvature(_) => 3,
            Error::Shape(_)
            | Error::UnknownLayer(_)
            | Error::State(_)
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::Io { .. } => 2,
        }
    }

    /// Short machine-readable tag used in single-line CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Numerical(_) => "numerical",
            Error::DegenerateCurvature(_) => "degenerate-curvature",
            Error::UnknownLayer(_) => "lookup",
            Error::State(_) => "state",
            Error::Validation(_) => "validation",
            Error::Parse { .. } => "parse",
            Error::Config { .. } | Error::MissingKey(_) => "config",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
        }
    }
}
