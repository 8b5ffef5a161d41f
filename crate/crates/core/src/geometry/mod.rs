//! Camera models, rotations, plane-induced homographies and the optimal
//! viewport construction behind the perspective-transformer chain.

mod linalg;
mod ops;
mod types;

pub use linalg::{Mat3, Vec3};
pub use ops::{
    axis_angle_to_rotation, build_ptl_chain, ground_normal_to_axis_angle, horizon_to_ground_normal,
    invert_chain, optimal_viewport, plane_induced_homography, pure_rotation_homography,
    split_rotation,
};
pub use types::{
    CameraIntrinsics, ChainStep, GroundPlane, Homography, KeyPointSet, PTLChain, RotationMatrix,
    ViewSpec,
};

#[derive(Debug, Clone, thiserror::Error)]
pub enum GeometryError {
    #[error("horizon directions are parallel")]
    DegenerateHorizon,
    #[error("normal opposes the optical axis; rotation axis is ambiguous")]
    AmbiguousAxis,
    #[error("normal vector is not unit length")]
    NonUnitNormal,
    #[error("plane distance must be positive")]
    NonPositivePlaneDistance,
    #[error("invalid step count {0}; need at least 1")]
    InvalidStepCount(usize),
    #[error("expected {expected} target widths, got {got}")]
    WidthCountMismatch { expected: usize, got: usize },
    #[error("homography is singular")]
    SingularHomography,
    #[error("matrix is not a rotation (orthogonality error {ortho_err}, det error {det_err})")]
    NotARotation { ortho_err: f64, det_err: f64 },
    #[error("invalid camera intrinsics")]
    InvalidIntrinsics,
    #[error("view must have positive pixel extents")]
    EmptyView,
    #[error("key point lies behind the rotated camera")]
    KeyPointBehindCamera,
    #[error("key-point bounding box is degenerate")]
    EmptyBoundingBox,
    #[error("need at least 3 key points, got {0}")]
    TooFewKeyPoints(usize),
    #[error("key point has non-finite coordinates")]
    NonFiniteKeyPoint,
    #[error("consecutive steps disagree on their shared viewport")]
    BrokenViewChain,
    #[error("composed steps differ from the integral homography (error {0})")]
    CompositionMismatch(f64),
}
