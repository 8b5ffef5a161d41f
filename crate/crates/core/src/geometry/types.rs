//! Domain types for the camera / homography pipeline.

use super::linalg::{Mat3, Vec3};
use super::GeometryError;
use crate::num::Real;

/// 3x3 rotation matrix, kept orthonormal by construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix<T> {
    m: Mat3<T>,
}

impl<T: Real> RotationMatrix<T> {
    pub fn identity() -> Self {
        Self { m: Mat3::identity() }
    }

    /// Wraps a matrix after checking orthonormality (1e-9) and det = 1.
    pub fn from_matrix(m: Mat3<T>) -> Result<Self, GeometryError> {
        let gram = m.transpose().mul(&m);
        let ortho_err = gram.sub(&Mat3::identity()).frobenius();
        let det_err = (m.det() - T::one()).abs();
        if ortho_err > T::of(1e-9) || det_err > T::of(1e-9) {
            return Err(GeometryError::NotARotation {
                ortho_err: ortho_err.to_f64().unwrap_or(f64::NAN),
                det_err: det_err.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &Mat3<T> {
        &self.m
    }

    pub fn apply(&self, v: &Vec3<T>) -> Vec3<T> {
        self.m.mul_vec(v)
    }

    pub fn compose(&self, o: &Self) -> Self {
        Self { m: self.m.mul(&o.m) }
    }

    pub(crate) fn from_matrix_unchecked(m: Mat3<T>) -> Self {
        Self { m }
    }
}

/// Pinhole intrinsics with a single isotropic focal length (pixels).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics<T> {
    pub f: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(f: T, cx: T, cy: T) -> Result<Self, GeometryError> {
        if !(f > T::zero()) || !f.is_finite() || !cx.is_finite() || !cy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics);
        }
        Ok(Self { f, cx, cy })
    }

    pub fn matrix(&self) -> Mat3<T> {
        let (z, o) = (T::zero(), T::one());
        Mat3::from_rows([self.f, z, self.cx], [z, self.f, self.cy], [z, z, o])
    }

    pub fn inverse_matrix(&self) -> Mat3<T> {
        let (z, o) = (T::zero(), T::one());
        let fi = o / self.f;
        Mat3::from_rows(
            [fi, z, -self.cx * fi],
            [z, fi, -self.cy * fi],
            [z, z, o],
        )
    }

    /// Pixel point -> camera-coordinate direction (z = 1 scale).
    pub fn unproject(&self, x: T, y: T) -> Vec3<T> {
        Vec3::new((x - self.cx) / self.f, (y - self.cy) / self.f, T::one())
    }
}

/// Ground plane in camera coordinates: points X with n . X = d.
#[derive(Clone, Copy, Debug)]
pub struct GroundPlane<T> {
    pub n: Vec3<T>,
    pub d: T,
}

impl<T: Real> GroundPlane<T> {
    pub fn new(n: Vec3<T>, d: T) -> Result<Self, GeometryError> {
        if (n.norm() - T::one()).abs() > T::of(1e-12) {
            return Err(GeometryError::NonUnitNormal);
        }
        if !(d > T::zero()) {
            return Err(GeometryError::NonPositivePlaneDistance);
        }
        Ok(Self { n, d })
    }
}

/// Intrinsics plus pixel extents of a (virtual) view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewSpec<T> {
    pub intrinsics: CameraIntrinsics<T>,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> ViewSpec<T> {
    pub fn new(intrinsics: CameraIntrinsics<T>, width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyView);
        }
        Ok(Self { intrinsics, width, height })
    }
}

/// Projective map from source pixel coordinates to target pixel coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Homography<T> {
    matrix: Mat3<T>,
    pub source: ViewSpec<T>,
    pub target: ViewSpec<T>,
}

impl<T: Real> Homography<T> {
    /// Keeps the matrix exactly as given (so integer translations stay
    /// bit-exact under warping) but rejects rank-deficient inputs, judged
    /// after projective normalization. Comparisons go through
    /// [`Mat3::projective_distance`].
    pub fn new(matrix: Mat3<T>, source: ViewSpec<T>, target: ViewSpec<T>) -> Result<Self, GeometryError> {
        if matrix.projective_normalized().det().abs() <= T::of(1e-12) {
            return Err(GeometryError::SingularHomography);
        }
        Ok(Self { matrix, source, target })
    }

    pub fn identity(view: ViewSpec<T>) -> Self {
        Self { matrix: Mat3::identity(), source: view, target: view }
    }

    pub fn matrix(&self) -> &Mat3<T> {
        &self.matrix
    }

    /// Map a source pixel; `None` when the point goes through infinity.
    pub fn apply(&self, x: T, y: T) -> Option<(T, T)> {
        let p = self.matrix.mul_vec(&Vec3::new(x, y, T::one()));
        if p.z.abs() < T::of(1e-12) {
            return None;
        }
        Some((p.x / p.z, p.y / p.z))
    }

    pub fn inverse(&self) -> Result<Self, GeometryError> {
        let inv = self.matrix.inverse().ok_or(GeometryError::SingularHomography)?;
        Homography::new(inv, self.target, self.source)
    }

    /// Composition: `other` after `self` (self.source -> other.target).
    pub fn then(&self, other: &Self) -> Result<Self, GeometryError> {
        Homography::new(other.matrix.mul(&self.matrix), self.source, other.target)
    }
}

/// Border points of the ground region, as homogeneous front-view pixels.
#[derive(Clone, Debug)]
pub struct KeyPointSet<T> {
    points: Vec<Vec3<T>>,
}

impl<T: Real> KeyPointSet<T> {
    pub fn from_pixels(pixels: &[(T, T)]) -> Result<Self, GeometryError> {
        if pixels.len() < 3 {
            return Err(GeometryError::TooFewKeyPoints(pixels.len()));
        }
        let points: Vec<Vec3<T>> = pixels
            .iter()
            .map(|&(x, y)| Vec3::new(x, y, T::one()))
            .collect();
        if points.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFiniteKeyPoint);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }
}

/// One encoder transform: a rotation step and the homography it induces.
#[derive(Clone, Debug)]
pub struct ChainStep<T> {
    pub rotation: RotationMatrix<T>,
    pub homography: Homography<T>,
}

/// Ordered perspective-transformer steps plus their one-shot composition.
#[derive(Clone, Debug)]
pub struct PTLChain<T> {
    pub steps: Vec<ChainStep<T>>,
    pub integral: Homography<T>,
}

impl<T: Real> PTLChain<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn source_view(&self) -> ViewSpec<T> {
        self.integral.source
    }

    pub fn target_view(&self) -> ViewSpec<T> {
        self.integral.target
    }

    /// Ordered product of the step matrices (step 0 applied first).
    pub fn composed(&self) -> Result<Homography<T>, GeometryError> {
        let mut acc = self.steps[0].homography;
        for step in &self.steps[1..] {
            acc = acc.then(&step.homography)?;
        }
        Ok(acc)
    }

    /// Checks step viewport chaining and the composition-equals-integral
    /// invariant (relative Frobenius error 1e-9).
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.steps.is_empty() {
            return Err(GeometryError::InvalidStepCount(0));
        }
        for pair in self.steps.windows(2) {
            if pair[0].homography.target != pair[1].homography.source {
                return Err(GeometryError::BrokenViewChain);
            }
        }
        let composed = self.composed()?;
        let err = composed.matrix().projective_distance(self.integral.matrix());
        if err > T::of(1e-9) {
            return Err(GeometryError::CompositionMismatch(
                err.to_f64().unwrap_or(f64::NAN),
            ));
        }
        Ok(())
    }
}
