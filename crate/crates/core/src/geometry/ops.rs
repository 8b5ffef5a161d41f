//! Homography construction and decomposition: horizon -> ground normal ->
//! axis-angle -> split rotations -> per-step viewports and homographies.

use super::linalg::{Mat3, Vec3};
use super::types::{
    CameraIntrinsics, ChainStep, GroundPlane, Homography, KeyPointSet, PTLChain, RotationMatrix,
    ViewSpec,
};
use super::GeometryError;
use crate::num::Real;

/// Ground-plane normal from two horizon directions in camera coordinates
/// (pixel points premultiplied by K^-1). Left-then-right ordering yields a
/// normal facing the ground (positive y in the x-right / y-down / z-forward
/// convention).
pub fn horizon_to_ground_normal<T: Real>(
    p_left: &Vec3<T>,
    p_right: &Vec3<T>,
) -> Result<Vec3<T>, GeometryError> {
    let c = p_left.cross(p_right);
    let n = c.norm();
    if n <= T::of(1e-12) {
        return Err(GeometryError::DegenerateHorizon);
    }
    Ok(c.scaled(T::one() / n))
}

/// Axis-angle rotation taking the optical axis e3 onto the unit normal `n`.
/// `n = e3` needs no rotation and returns zero; `n = -e3` has no preferred
/// axis and is rejected.
pub fn ground_normal_to_axis_angle<T: Real>(n: &Vec3<T>) -> Result<Vec3<T>, GeometryError> {
    if (n.norm() - T::one()).abs() > T::of(1e-9) {
        return Err(GeometryError::NonUnitNormal);
    }
    let e3 = Vec3::e3();
    let axis_raw = e3.cross(n);
    let sin_angle = axis_raw.norm();
    let cos_angle = e3.dot(n);
    if sin_angle < T::of(1e-12) {
        if cos_angle > T::zero() {
            return Ok(Vec3::zero());
        }
        return Err(GeometryError::AmbiguousAxis);
    }
    let angle = sin_angle.atan2(cos_angle);
    Ok(axis_raw.scaled(angle / sin_angle))
}

/// Rodrigues formula. Zero rotation returns the identity.
pub fn axis_angle_to_rotation<T: Real>(omega: &Vec3<T>) -> RotationMatrix<T> {
    let angle = omega.norm();
    if angle < T::of(1e-300) {
        return RotationMatrix::identity();
    }
    let axis = omega.scaled(T::one() / angle);
    let (s, c) = (angle.sin(), angle.cos());
    let (z, o) = (T::zero(), T::one());
    let k = Mat3::from_rows([z, -axis.z, axis.y], [axis.z, z, -axis.x], [-axis.y, axis.x, z]);
    let m = Mat3::identity()
        .sub(&k.scaled(-s))
        .sub(&k.mul(&k).scaled(c - o));
    RotationMatrix::from_matrix_unchecked(m)
}

/// N identical rotations about the shared axis, each of angle |omega|/N.
pub fn split_rotation<T: Real>(
    omega: &Vec3<T>,
    n: usize,
) -> Result<Vec<RotationMatrix<T>>, GeometryError> {
    if n < 1 {
        return Err(GeometryError::InvalidStepCount(n));
    }
    let step = axis_angle_to_rotation(&omega.scaled(T::one() / T::from_usize(n).unwrap()));
    Ok(vec![step; n])
}

/// H = K_dst R K_src^-1 between two views of a purely rotating camera.
pub fn pure_rotation_homography<T: Real>(
    src: ViewSpec<T>,
    dst: ViewSpec<T>,
    r: &RotationMatrix<T>,
) -> Result<Homography<T>, GeometryError> {
    let m = dst
        .intrinsics
        .matrix()
        .mul(r.matrix())
        .mul(&src.intrinsics.inverse_matrix());
    Homography::new(m, src, dst)
}

/// H = K_dst (R - t n^T / d) K_src^-1 induced by the ground plane.
pub fn plane_induced_homography<T: Real>(
    src: ViewSpec<T>,
    dst: ViewSpec<T>,
    r: &RotationMatrix<T>,
    t: &Vec3<T>,
    plane: &GroundPlane<T>,
) -> Result<Homography<T>, GeometryError> {
    let factor = r
        .matrix()
        .sub(&Mat3::outer(t, &plane.n).scaled(T::one() / plane.d));
    let m = dst
        .intrinsics
        .matrix()
        .mul(&factor)
        .mul(&src.intrinsics.inverse_matrix());
    Homography::new(m, src, dst)
}

/// Key-point bounding-box viewport selection.
///
/// Rotates the K^-1-normalized key points into the next view, z-normalizes,
/// bounds them, then picks the focal length that maps the box width onto
/// `w_next` and the translation that puts the box's left-top corner at pixel
/// (0,0). Returns the next intrinsics and the view height (rounded up so no
/// key point is cropped).
pub fn optimal_viewport<T: Real>(
    k_i: &CameraIntrinsics<T>,
    r_i: &RotationMatrix<T>,
    keypoints: &KeyPointSet<T>,
    w_next: u32,
) -> Result<(CameraIntrinsics<T>, u32), GeometryError> {
    let k_inv = k_i.inverse_matrix();
    let mut min_x = T::infinity();
    let mut max_x = T::neg_infinity();
    let mut min_y = T::infinity();
    let mut max_y = T::neg_infinity();
    for p in keypoints.points() {
        let cam = r_i.apply(&k_inv.mul_vec(p));
        if cam.z <= T::of(1e-6) {
            return Err(GeometryError::KeyPointBehindCamera);
        }
        let x = cam.x / cam.z.abs();
        let y = cam.y / cam.z.abs();
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let bb_width = max_x - min_x;
    let bb_height = max_y - min_y;
    if bb_width < T::of(1e-9) || bb_height < T::of(1e-9) {
        return Err(GeometryError::EmptyBoundingBox);
    }
    let f_next = T::from_u32(w_next).unwrap() / bb_width;
    let h_next = (f_next * bb_height).ceil().to_u32().unwrap_or(0).max(1);
    let k_next = CameraIntrinsics::new(f_next, -f_next * min_x, -f_next * min_y)?;
    Ok((k_next, h_next))
}

/// Builds the full encoder chain: horizon -> normal -> axis-angle, split into
/// N even rotations, with per-step viewports from the key-point boxes and
/// pure-rotation step homographies. The integral homography is the one-shot
/// map built from the unsplit rotation and the final viewport.
pub fn build_ptl_chain<T: Real>(
    view0: ViewSpec<T>,
    horizon: ((T, T), (T, T)),
    keypoints: &KeyPointSet<T>,
    n: usize,
    w_targets: &[u32],
) -> Result<PTLChain<T>, GeometryError> {
    if n < 1 {
        return Err(GeometryError::InvalidStepCount(n));
    }
    if w_targets.len() != n {
        return Err(GeometryError::WidthCountMismatch {
            expected: n,
            got: w_targets.len(),
        });
    }
    let k0 = view0.intrinsics;
    let p_left = k0.unproject(horizon.0 .0, horizon.0 .1);
    let p_right = k0.unproject(horizon.1 .0, horizon.1 .1);
    let normal = horizon_to_ground_normal(&p_left, &p_right)?;
    let omega = ground_normal_to_axis_angle(&normal)?;
    // exp(omega) rotates the camera's z-axis onto the normal; point
    // coordinates transform by its inverse, so the chain splits -omega.
    let rotations = split_rotation(&omega.scaled(-T::one()), n)?;

    let mut steps = Vec::with_capacity(n);
    let mut view_i = view0;
    let mut points = keypoints.clone();
    for (i, rot) in rotations.iter().enumerate() {
        let (k_next, h_next) = optimal_viewport(&view_i.intrinsics, rot, &points, w_targets[i])?;
        let view_next = ViewSpec::new(k_next, w_targets[i], h_next)?;
        let hom = pure_rotation_homography(view_i, view_next, rot)?;
        // carry the key points into the new view's pixel coordinates
        let moved: Vec<(T, T)> = points
            .points()
            .iter()
            .map(|p| hom.apply(p.x, p.y).ok_or(GeometryError::KeyPointBehindCamera))
            .collect::<Result<_, _>>()?;
        points = KeyPointSet::from_pixels(&moved)?;
        steps.push(ChainStep { rotation: *rot, homography: hom });
        view_i = view_next;
    }

    let integral_rotation = axis_angle_to_rotation(&omega.scaled(-T::one()));
    let integral = pure_rotation_homography(view0, view_i, &integral_rotation)?;
    let chain = PTLChain { steps, integral };
    chain.validate()?;
    Ok(chain)
}

/// Decoder side: steps reversed, homographies inverted, viewports swapped.
pub fn invert_chain<T: Real>(chain: &PTLChain<T>) -> Result<PTLChain<T>, GeometryError> {
    let steps: Vec<ChainStep<T>> = chain
        .steps
        .iter()
        .rev()
        .map(|s| {
            Ok(ChainStep {
                rotation: RotationMatrix::from_matrix_unchecked(s.rotation.matrix().transpose()),
                homography: s.homography.inverse()?,
            })
        })
        .collect::<Result<_, GeometryError>>()?;
    let integral = chain.integral.inverse()?;
    Ok(PTLChain { steps, integral })
}
