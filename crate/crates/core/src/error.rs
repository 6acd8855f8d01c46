use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite value produced at tensor #{node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("{op}: row {row} has no admissible entries")]
    DegenerateRow { op: &'static str, row: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: line {line}: {msg}", source_name.as_deref().unwrap_or("<input>"))]
    Parse {
        source_name: Option<String>,
        line: usize,
        msg: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("window of {window} exceeds sequence length {len}")]
    Window { window: usize, len: usize },

    #[error("weights sum to zero")]
    Normalization,

    #[error("decay {0} is outside (0, 1]")]
    Parameterization(f64),

    #[error("tagging scheme violation at position {position}: {tag}")]
    TaggingScheme { position: usize, tag: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a file name to a parse error produced from an anonymous stream.
    pub fn with_source_name(self, name: &str) -> Self {
        match self {
            Error::Parse { line, msg, .. } => Error::Parse {
                source_name: Some(name.to_string()),
                line,
                msg,
            },
            other => other,
        }
    }
}
