use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the operation's domain (e.g. a point behind
    /// the camera plane).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Geometric degeneracy, e.g. collinear correspondences.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// No robust model reached the required inlier support.
    #[error("pose solve failed: best model has {found} inliers, {required} required")]
    SolveFailed { found: usize, required: usize },

    #[error("joint {joint} angle {angle} outside limits [{min}, {max}]")]
    JointLimit {
        joint: usize,
        angle: f64,
        min: f64,
        max: f64,
    },

    #[error("config line {line}: {key}: {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
