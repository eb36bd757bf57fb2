use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// [`Error::is_input_error`] splits these into "the caller handed us bad
/// data" and "the pipeline could not produce a result", which the CLI maps
/// onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: String,
        offset: usize,
        message: String,
    },
    #[error("validation error at {field}: {message}")]
    Validation { field: String, message: String },
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("view has no mask")]
    MaskMissing,
    #[error("no image carries a mask (images[].mask)")]
    NoMaskedViews,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("grid of {voxels} voxels exceeds the 2^30 limit")]
    GridTooLarge { voxels: u64 },
    #[error("occupancy grid has no occupied voxel")]
    EmptyGrid,
    #[error("reconstruction extent missing: supply a point cloud or a bounding box")]
    MissingExtent,
    #[error("simplification collapsed the mesh to {vertices} vertices")]
    CollapseToDegenerate { vertices: usize },
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("ground-truth volume must be positive, got {0}")]
    NonPositiveGroundTruth(f64),
    #[error("empty list")]
    EmptyList,
    #[error("empty input to chamfer distance")]
    EmptyInput,
    #[error("frame interval must be at least 1, got {0}")]
    InvalidInterval(usize),
    #[error("image {width}x{height} is smaller than the 9x8 hash grid")]
    ImageTooSmall { width: u32, height: u32 },
    #[error("image decode failed for {path}: {message}")]
    Image { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by malformed or inconsistent input.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::MissingFile(_)
                | Error::InvalidConfig(_)
                | Error::MaskMissing
                | Error::NoMaskedViews
                | Error::EmptyCloud
                | Error::EmptyList
                | Error::EmptyInput
                | Error::InvalidInterval(_)
                | Error::ImageTooSmall { .. }
                | Error::Image { .. }
                | Error::NonPositiveGroundTruth(_)
                | Error::MissingExtent
                | Error::Io(_)
        )
    }
}
