use alloc::string::String;

/// Errors raised by the rendering core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("point lies on the camera principal plane")]
    DegenerateProjection,
    #[error("ray is parallel to the light slab planes")]
    ParallelRay,
    #[error("ray does not intersect the bounding sphere")]
    NoIntersection,
    #[error("ray is tangent to the bounding sphere")]
    TangentRay,
    #[error("ray direction has zero length")]
    ZeroDirection,
    #[error("invalid camera {view_id}: {reason}")]
    InvalidCamera { view_id: usize, reason: String },
    #[error("unknown view {view_id} (embedding table has {rows} rows)")]
    UnknownView { view_id: usize, rows: usize },
    #[error("need {needed} reference views but only {available} are available")]
    InsufficientViews { needed: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("every epipolar point of view {view} is masked")]
    AllPointsMasked { view: usize },
    #[error("every reference view is masked")]
    AllViewsMasked,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("image of {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall { width: usize, height: usize, window: usize },
    #[error("invalid synthetic scene: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
