//! Minimal fixed-size linear algebra: 3-vectors and 3x3 matrices over a
//! generic scalar. Only what the homography pipeline needs.

use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    /// Unit vector along the camera z-axis (the optical axis).
    pub fn e3() -> Self {
        Self::new(T::zero(), T::zero(), T::one())
    }

    pub fn dot(&self, o: &Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: &Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn normalized(&self) -> Self {
        self.scaled(T::one() / self.norm())
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Mat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn from_rows(r0: [T; 3], r1: [T; 3], r2: [T; 3]) -> Self {
        Mat3([r0, r1, r2])
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut out = [[T::zero(); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.0[i][0] * o.0[0][j] + self.0[i][1] * o.0[1][j] + self.0[i][2] * o.0[2][j];
            }
        }
        Mat3(out)
    }

    pub fn mul_vec(&self, v: &Vec3<T>) -> Vec3<T> {
        Vec3::new(
            self.0[0][0] * v.x + self.0[0][1] * v.y + self.0[0][2] * v.z,
            self.0[1][0] * v.x + self.0[1][1] * v.y + self.0[1][2] * v.z,
            self.0[2][0] * v.x + self.0[2][1] * v.y + self.0[2][2] * v.z,
        )
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> T {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse via the adjugate; `None` when the determinant vanishes.
    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det.abs() < T::of(1e-300) {
            return None;
        }
        let m = &self.0;
        let inv_det = T::one() / det;
        let cof = |a: T, b: T, c: T, d: T| (a * d - b * c) * inv_det;
        Some(Mat3([
            [
                cof(m[1][1], m[1][2], m[2][1], m[2][2]),
                cof(m[0][2], m[0][1], m[2][2], m[2][1]),
                cof(m[0][1], m[0][2], m[1][1], m[1][2]),
            ],
            [
                cof(m[1][2], m[1][0], m[2][2], m[2][0]),
                cof(m[0][0], m[0][2], m[2][0], m[2][2]),
                cof(m[0][2], m[0][0], m[1][2], m[1][0]),
            ],
            [
                cof(m[1][0], m[1][1], m[2][0], m[2][1]),
                cof(m[0][1], m[0][0], m[2][1], m[2][0]),
                cof(m[0][0], m[0][1], m[1][0], m[1][1]),
            ],
        ]))
    }

    pub fn frobenius(&self) -> T {
        self.0
            .iter()
            .flatten()
            .map(|v| *v * *v)
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut out = self.0;
        for row in out.iter_mut() {
            for v in row.iter_mut() {
                *v = *v * s;
            }
        }
        Mat3(out)
    }

    pub fn sub(&self, o: &Self) -> Self {
        let mut out = self.0;
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v - o.0[i][j];
            }
        }
        Mat3(out)
    }

    /// Outer product a * b^T.
    pub fn outer(a: &Vec3<T>, b: &Vec3<T>) -> Self {
        Mat3([
            [a.x * b.x, a.x * b.y, a.x * b.z],
            [a.y * b.x, a.y * b.y, a.y * b.z],
            [a.z * b.x, a.z * b.y, a.z * b.z],
        ])
    }

    /// Projective normalization: unit Frobenius norm with the (3,3) entry
    /// made non-negative. Resolves the scale ambiguity deterministically so
    /// matrices can be compared.
    pub fn projective_normalized(&self) -> Self {
        let mut out = self.scaled(T::one() / self.frobenius());
        if out.0[2][2] < T::zero() {
            out = out.scaled(-T::one());
        }
        out
    }

    /// Relative Frobenius distance between the projective normalizations.
    pub fn projective_distance(&self, o: &Self) -> T {
        self.projective_normalized()
            .sub(&o.projective_normalized())
            .frobenius()
    }

    /// Row-major text form used by golden files and `decompose` output.
    pub fn to_row_major_string(&self) -> String {
        self.0
            .iter()
            .map(|r| format!("{:?} {:?} {:?}", r[0], r[1], r[2]))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_roundtrip() {
        let m = Mat3::from_rows([2.0, 1.0, 0.5], [0.0, 3.0, -1.0], [1.0, 0.0, 4.0]);
        let inv = m.inverse().unwrap();
        let id = m.mul(&inv);
        assert!(id.sub(&Mat3::identity()).frobenius() < 1e-12);
    }

    #[test]
    fn singular_has_no_inverse() {
        let m = Mat3::from_rows([1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 1.0, 1.0]);
        assert!(m.inverse().is_none());
    }

    #[test]
    fn normalization_fixes_sign() {
        let m = Mat3::identity().scaled(-3.0f64);
        let n = m.projective_normalized();
        assert!(n.0[2][2] > 0.0);
        assert!((n.frobenius() - 1.0).abs() < 1e-14);
    }
}
