use std::path::PathBuf;

use thiserror::Error;
use ufl_autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what}: {reason} (at byte {offset})")]
    Format {
        what: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("vector is not unit norm (norm {norm})")]
    NotUnitNorm { norm: f64 },

    #[error("index {index} out of range for {len} instances")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("k = {k} exceeds the {n} available instances")]
    KTooLarge { k: usize, n: usize },

    #[error("memory bank has no class labels")]
    UnlabeledBank,

    #[error("class {class} has no instances")]
    EmptyClass { class: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("NCE normalizing constant has not been estimated")]
    UninitializedZ,

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by diverging numbers during training.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. }
                | Error::Autodiff(
                    AutodiffError::NonFiniteGradient { .. } | AutodiffError::ZeroNorm { .. }
                )
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
