use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("network contains a directed cycle through variable {0}")]
    CycleDetected(usize),

    #[error("index {index} out of range (expected < {bound})")]
    InvalidIndex { index: usize, bound: usize },

    #[error("duplicate edge {parent} -> {child}")]
    DuplicateEdge { parent: usize, child: usize },

    #[error("variable {var} has cardinality {card}; at least 2 states are required")]
    CardinalityTooSmall { var: usize, card: usize },

    #[error("full conditional of variable {var} has zero total weight")]
    ZeroSupport { var: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("data set contains no cases")]
    EmptyData,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("ROC requires at least one positive and one negative label")]
    DegenerateLabels,

    #[error("trace has no records")]
    EmptyTrace,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error{}: {msg}", fmt_location(.path, .line))]
    Parse { path: Option<PathBuf>, line: Option<usize>, msg: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_location(path: &Option<PathBuf>, line: &Option<usize>) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!(" in {} at line {}", p.display(), l),
        (Some(p), None) => format!(" in {}", p.display()),
        (None, Some(l)) => format!(" at line {l}"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse { path: None, line: None, msg: msg.into() }
    }

    pub(crate) fn parse_at(path: Option<&std::path::Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.map(|p| p.to_path_buf()), line: Some(line), msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by malformed input or invalid settings, as
    /// opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::CycleDetected(_)
                | Error::InvalidIndex { .. }
                | Error::DuplicateEdge { .. }
                | Error::CardinalityTooSmall { .. }
                | Error::DimensionMismatch(_)
                | Error::ShapeMismatch(_)
                | Error::InvalidConfig(_)
                | Error::Parse { .. }
                | Error::EmptyData
                | Error::DegenerateLabels
        )
    }
}
