use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at `{node}`: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced at `{0}`")]
    NonFinite(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate quadrilateral: DLT system is singular (condition estimate {0:.3e})")]
    DegenerateQuad(f64),

    #[error("homography is singular")]
    SingularHomography,

    #[error("point maps to the line at infinity")]
    PointAtInfinity,

    #[error("degenerate overlap: {0}")]
    DegenerateOverlap(String),

    #[error("image too small: {0}")]
    TooSmall(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("training diverged at iteration {0}")]
    Diverged(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("record `{id}`: {detail}")]
    Record { id: String, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image {path}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    /// True for failures of the numerics (divergence, degenerate geometry)
    /// as opposed to bad data or IO.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::DegenerateQuad(_)
                | Error::SingularHomography
                | Error::PointAtInfinity
                | Error::DegenerateOverlap(_)
                | Error::Diverged(_)
        )
    }
}
