use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("no heatmap for class {0}")]
    MissingHeatmap(u8),

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("loss became non-finite at epoch {0}")]
    NonFiniteLoss(usize),

    #[error("likelihood fit needs both object and background pixels")]
    EmptyPartition,

    #[error("saliency refinement needs a single-class image, got {0} classes")]
    MultiClassImage(usize),

    #[error("no saliency map for image {0}")]
    MissingSaliency(String),

    #[error("supervision contains no labeled pixels")]
    NoLabeledPixels,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::Parse { .. }
                | Error::MissingFiles(_)
                | Error::DimensionMismatch { .. }
                | Error::MissingHeatmap(_)
                | Error::MultiClassImage(_)
                | Error::MissingSaliency(_)
                | Error::Config(_)
        )
    }
}
