//! Consecutive differentiable perspective transforms ("perspective
//! transformer layers") with a toy encoder-decoder segmentation network,
//! a synthetic road-scene renderer, and TuSimple-style evaluation metrics.
//!
//! All numeric modules are generic over the scalar via [`num::Real`]
//! (f32 or f64); the aliases below pin the f64 instantiations that the CLI
//! and tolerances assume.

pub mod autodiff;
pub mod config;
pub mod eval;
pub mod geometry;
pub mod num;
pub mod ptseg;
pub mod scenedata;
pub mod warp;

/// f64 instantiations used throughout the CLI and tests.
pub type Vec3 = geometry::Vec3<f64>;
pub type Mat3 = geometry::Mat3<f64>;
pub type RotationMatrix = geometry::RotationMatrix<f64>;
pub type CameraIntrinsics = geometry::CameraIntrinsics<f64>;
pub type GroundPlane = geometry::GroundPlane<f64>;
pub type ViewSpec = geometry::ViewSpec<f64>;
pub type Homography = geometry::Homography<f64>;
pub type KeyPointSet = geometry::KeyPointSet<f64>;
pub type PTLChain = geometry::PTLChain<f64>;
pub type FeatureMap = warp::FeatureMap<f64>;
pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type AdamState = autodiff::AdamState<f64>;
pub type PTSegModel = ptseg::PTSegModel<f64>;
