use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box {0:?}: corners must be finite with x1 <= x2 and y1 <= y2")]
    InvalidBox(BBox),
    #[error("anchor ({}, {}) lies outside the regression target box", anchor.0, anchor.1)]
    AnchorOutsideTarget { anchor: (f64, f64) },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("scene {scene}: placed {placed} of {requested} objects after {attempts} attempts; scene too small for the requested objects")]
    Sizing {
        scene: usize,
        placed: usize,
        requested: usize,
        attempts: usize,
    },

    #[error("all class counts are zero; sampling weights undefined")]
    NoPositiveCounts,

    #[error("foreground class {class} is not in the sampled class subset")]
    ClassOutsideSubset { class: usize },

    #[error("object extent {extent} is not covered by any pyramid level")]
    UnassignableObject { extent: f64 },

    #[error("non-finite loss at iteration {iteration} in term `{term}`")]
    NonFiniteLoss { iteration: usize, term: &'static str },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
