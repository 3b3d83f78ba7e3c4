use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GdrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GdrError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },

    #[error("value {value} at voxel {index} outside [{min}, {max}]")]
    OutOfRange { index: usize, value: f64, min: f64, max: f64 },

    #[error("singular Jacobian at time index {time_index}, voxel {voxel} (det {det:e})")]
    SingularJacobian { time_index: usize, voxel: usize, det: f64 },

    #[error("non-positive Jacobian determinant at time index {time_index}, voxel {voxel} (det {det:e})")]
    NonPositiveJacobian { time_index: usize, voxel: usize, det: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("not a descent direction: <Z, g> = {0:e}")]
    NotDescent(f64),

    #[error("momentum/velocity mismatch: max |K*w - v| = {max_dev:e}")]
    MomentumMismatch { max_dev: f64 },

    #[error("{path}: payload size mismatch, expected {expected} bytes, found {actual}")]
    SizeMismatch { path: PathBuf, expected: u64, actual: u64 },

    #[error("unknown element type {0:?}")]
    UnknownElementType(String),

    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("invalid mask value {value} at voxel {index} (masks must be 0 or 1)")]
    InvalidMask { index: usize, value: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GdrError {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            GdrError::InvalidGeometry(_) => "invalid_geometry",
            GdrError::GeometryMismatch(_) => "geometry_mismatch",
            GdrError::NonFinite { .. } => "non_finite",
            GdrError::OutOfRange { .. } => "out_of_range",
            GdrError::SingularJacobian { .. } => "singular_jacobian",
            GdrError::NonPositiveJacobian { .. } => "non_positive_jacobian",
            GdrError::InvalidParameter(_) => "invalid_parameter",
            GdrError::NotDescent(_) => "not_descent",
            GdrError::MomentumMismatch { .. } => "momentum_mismatch",
            GdrError::SizeMismatch { .. } => "size_mismatch",
            GdrError::UnknownElementType(_) => "unknown_element_type",
            GdrError::MalformedHeader { .. } => "malformed_header",
            GdrError::InvalidMask { .. } => "invalid_mask",
            GdrError::Config(_) => "config",
            GdrError::Io { .. } => "io",
            GdrError::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GdrError::Io { path: path.into(), source }
    }

    /// True for failures that make a trial iterate infeasible rather than
    /// signalling a programming or input error.
    pub fn is_infeasible_flow(&self) -> bool {
        matches!(
            self,
            GdrError::SingularJacobian { .. } | GdrError::NonPositiveJacobian { .. } | GdrError::NonFinite { .. }
        )
    }
}
