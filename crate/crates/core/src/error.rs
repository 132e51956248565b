use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("lesion mask has no foreground pixels")]
    EmptyMask,
    #[error("bounding box has zero area after clamping: {0}")]
    InvalidBox(String),
    #[error("breast region of image {image_id} cannot hold a {side}px crop")]
    InsufficientTissue { image_id: String, side: usize },
    #[error("{patients} patients cannot be split into {folds} folds")]
    TooFewPatients { patients: usize, folds: usize },
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("image of shape {shape:?} is smaller than the minimum dimension {min_dim}")]
    ImageTooSmall { shape: (usize, usize), min_dim: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at {stage}: non-finite loss")]
    TrainingDiverged { stage: String },
    #[error("pretrained weights unavailable at {0}")]
    WeightsUnavailable(PathBuf),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("ROC-AUC undefined for class {class}: needs at least one positive and one negative")]
    UndefinedAuc { class: String },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("ensemble members disagree on class order")]
    IncompatibleMembers,
    #[error("experiment cell {cell} failed: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
