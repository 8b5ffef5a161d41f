//! The perspective transformer layer itself: bilinear inverse-warp of a
//! feature map under a fixed homography, plus the exact adjoint backward
//! pass and the stride rescaling used on downsampled maps.
//!
//! Conventions (golden tests depend on these):
//! - pixel (row i, col j) sits at continuous coordinate (x = j, y = i), no
//!   +0.5 center offset;
//! - the stored homography maps source -> target pixels, the sampler
//!   iterates target pixels and pulls through the inverse;
//! - samples outside the source contribute zero.

use crate::geometry::{CameraIntrinsics, GeometryError, Homography, Mat3, ViewSpec};
use crate::num::Real;

#[derive(Debug, Clone, thiserror::Error)]
pub enum WarpError {
    #[error("feature map is {got:?} but the homography expects {expected:?} (c,h,w)")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// C x H x W grid of reals, the currency flowing between PTLs and convs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}

/// The four bilinear taps for a continuous sample position, with weights.
/// Out-of-bounds taps are dropped (zero padding). Positions whose
/// homogeneous depth nearly vanishes get no taps at all.
#[inline]
fn bilinear_taps<T: Real>(
    hinv: &Mat3<T>,
    x: usize,
    y: usize,
    src_h: usize,
    src_w: usize,
) -> [(usize, usize, T); 4] {
    let mut taps = [(0usize, 0usize, T::zero()); 4];
    let p = hinv.mul_vec(&crate::geometry::Vec3::new(
        T::from_usize(x).unwrap(),
        T::from_usize(y).unwrap(),
        T::one(),
    ));
    if p.z.abs() < T::of(1e-12) {
        return taps;
    }
    let sx = p.x / p.z;
    let sy = p.y / p.z;
    let x0f = sx.floor();
    let y0f = sy.floor();
    let fx = sx - x0f;
    let fy = sy - y0f;
    let x0 = x0f.to_isize().unwrap_or(isize::MIN / 2);
    let y0 = y0f.to_isize().unwrap_or(isize::MIN / 2);
    let one = T::one();
    let corners = [
        (x0, y0, (one - fx) * (one - fy)),
        (x0 + 1, y0, fx * (one - fy)),
        (x0, y0 + 1, (one - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (i, (cx, cy, w)) in corners.into_iter().enumerate() {
        if cx >= 0 && cy >= 0 && (cx as usize) < src_w && (cy as usize) < src_h {
            taps[i] = (cx as usize, cy as usize, w);
        }
    }
    taps
}

fn expect_shape<T: Real>(
    fm: &FeatureMap<T>,
    view: &ViewSpec<T>,
    channels: usize,
) -> Result<(), WarpError> {
    let expected = (channels, view.height as usize, view.width as usize);
    if fm.shape() != expected {
        return Err(WarpError::ShapeMismatch { expected, got: fm.shape() });
    }
    Ok(())
}

/// Warps `fm` (laid out in `h.source`) into `h.target` by pulling each
/// target pixel through the inverse homography with bilinear interpolation.
pub fn warp_forward<T: Real>(fm: &FeatureMap<T>, h: &Homography<T>) -> Result<FeatureMap<T>, WarpError> {
    expect_shape(fm, &h.source, fm.channels())?;
    let hinv = h.matrix().inverse().ok_or(GeometryError::SingularHomography)?;
    let (c, src_h, src_w) = fm.shape();
    let (out_h, out_w) = (h.target.height as usize, h.target.width as usize);
    let mut out = FeatureMap::zeros(c, out_h, out_w);
    for y in 0..out_h {
        for x in 0..out_w {
            let taps = bilinear_taps(&hinv, x, y, src_h, src_w);
            for ch in 0..c {
                let mut acc = T::zero();
                for &(tx, ty, w) in &taps {
                    if w != T::zero() {
                        acc = acc + fm.at(ch, ty, tx) * w;
                    }
                }
                *out.at_mut(ch, y, x) = acc;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`warp_forward`]: scatters `grad_out` (in `h.target`) back
/// through the same bilinear taps into the input layout.
pub fn warp_backward<T: Real>(
    grad_out: &FeatureMap<T>,
    h: &Homography<T>,
    in_shape: (usize, usize, usize),
) -> Result<FeatureMap<T>, WarpError> {
    expect_shape(grad_out, &h.target, grad_out.channels())?;
    let (c, src_h, src_w) = in_shape;
    if grad_out.channels() != c {
        return Err(WarpError::ShapeMismatch { expected: in_shape, got: grad_out.shape() });
    }
    let hinv = h.matrix().inverse().ok_or(GeometryError::SingularHomography)?;
    let (out_h, out_w) = (grad_out.height(), grad_out.width());
    let mut grad_in = FeatureMap::zeros(c, src_h, src_w);
    for y in 0..out_h {
        for x in 0..out_w {
            let taps = bilinear_taps(&hinv, x, y, src_h, src_w);
            for ch in 0..c {
                let g = grad_out.at(ch, y, x);
                for &(tx, ty, w) in &taps {
                    if w != T::zero() {
                        *grad_in.at_mut(ch, ty, tx) = grad_in.at(ch, ty, tx) + g * w;
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

fn scale_view<T: Real>(view: &ViewSpec<T>, stride: u32) -> ViewSpec<T> {
    let s = T::from_u32(stride).unwrap();
    ViewSpec {
        intrinsics: CameraIntrinsics {
            f: view.intrinsics.f / s,
            cx: view.intrinsics.cx / s,
            cy: view.intrinsics.cy / s,
        },
        width: view.width.div_ceil(stride),
        height: view.height.div_ceil(stride),
    }
}

/// Conjugates `h` by diag(1/stride, 1/stride, 1) so it acts on maps whose
/// pixel grid was downsampled by `stride`; viewports shrink by ceiling
/// division.
pub fn scale_homography_for_stride<T: Real>(
    h: &Homography<T>,
    stride: u32,
) -> Result<Homography<T>, WarpError> {
    if stride == 1 {
        return Ok(*h);
    }
    let s = T::from_u32(stride).unwrap();
    let inv = T::one() / s;
    let scale = Mat3::from_rows(
        [inv, T::zero(), T::zero()],
        [T::zero(), inv, T::zero()],
        [T::zero(), T::zero(), T::one()],
    );
    let unscale = Mat3::from_rows(
        [s, T::zero(), T::zero()],
        [T::zero(), s, T::zero()],
        [T::zero(), T::zero(), T::one()],
    );
    let m = scale.mul(h.matrix()).mul(&unscale);
    Ok(Homography::new(m, scale_view(&h.source, stride), scale_view(&h.target, stride))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Homography, Mat3, ViewSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn view(w: u32, h: u32) -> ViewSpec<f64> {
        ViewSpec::new(CameraIntrinsics::new(1.0, 0.0, 0.0).unwrap(), w, h).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// A random invertible homography that stays close to the identity so
    /// warped content largely remains in bounds.
    fn random_homography(rng: &mut ChaCha8Rng, src: ViewSpec<f64>, dst: ViewSpec<f64>) -> Homography<f64> {
        loop {
            let m = Mat3::from_rows(
                [1.0 + rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-1.0..1.0)],
                [rng.gen_range(-0.2..0.2), 1.0 + rng.gen_range(-0.2..0.2), rng.gen_range(-1.0..1.0)],
                [rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02), 1.0],
            );
            if let Ok(h) = Homography::new(m, src, dst) {
                return h;
            }
        }
    }

    #[test]
    fn identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm = random_map(&mut rng, 2, 5, 7);
        let h = Homography::identity(view(7, 5));
        let out = warp_forward(&fm, &h).unwrap();
        assert_eq!(out, fm);
        let g = warp_backward(&fm, &h, fm.shape()).unwrap();
        assert_eq!(g, fm);
    }

    #[test]
    fn integer_translation_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fm = random_map(&mut rng, 1, 4, 6);
        let m = Mat3::from_rows([1.0, 0.0, 2.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
        let h = Homography::new(m, view(6, 4), view(6, 4)).unwrap();
        let out = warp_forward(&fm, &h).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let expect = if x >= 2 { fm.at(0, y, x - 2) } else { 0.0 };
                assert_eq!(out.at(0, y, x), expect);
            }
        }
    }

    #[test]
    fn matches_reference_sampler() {
        // oracle: naive scalar bilinear sampler written independently
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fm = random_map(&mut rng, 1, 5, 7);
        let h = random_homography(&mut rng, view(7, 5), view(7, 5));
        let out = warp_forward(&fm, &h).unwrap();
        let hinv = h.matrix().inverse().unwrap();
        for y in 0..5usize {
            for x in 0..7usize {
                let p = hinv.mul_vec(&crate::geometry::Vec3::new(x as f64, y as f64, 1.0));
                let sx = p.x / p.z;
                let sy = p.y / p.z;
                let sample = |ix: isize, iy: isize| -> f64 {
                    if ix < 0 || iy < 0 || ix >= 7 || iy >= 5 {
                        0.0
                    } else {
                        fm.at(0, iy as usize, ix as usize)
                    }
                };
                let x0 = sx.floor();
                let y0 = sy.floor();
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let expect = sample(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + sample(x0 + 1, y0) * fx * (1.0 - fy)
                    + sample(x0, y0 + 1) * (1.0 - fx) * fy
                    + sample(x0 + 1, y0 + 1) * fx * fy;
                assert!((out.at(0, y, x) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let src = view(6, 5);
            let dst = view(7, 4);
            let h = random_homography(&mut rng, src, dst);
            let x = random_map(&mut rng, 2, 5, 6);
            let y = random_map(&mut rng, 2, 4, 7);
            let fx = warp_forward(&x, &h).unwrap();
            let bty = warp_backward(&y, &h, x.shape()).unwrap();
            let lhs: f64 = fx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(bty.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-12, "adjoint mismatch {}", (lhs - rhs).abs());
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = view(4, 4);
        let dst = view(4, 4);
        let h = random_homography(&mut rng, src, dst);
        let x = random_map(&mut rng, 1, 4, 4);
        // scalar loss: weighted sum of the warped output
        let wts = random_map(&mut rng, 1, 4, 4);
        let loss = |m: &FeatureMap<f64>| -> f64 {
            warp_forward(m, &h)
                .unwrap()
                .data()
                .iter()
                .zip(wts.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let grad = warp_backward(&wts, &h, x.shape()).unwrap();
        let eps = 1e-6;
        for i in 0..x.data().len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let analytic = grad.data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            assert!(((analytic - numeric) / denom).abs() <= 1e-6);
        }
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_homography(&mut rng, view(5, 5), view(5, 5));
        let a = random_map(&mut rng, 1, 5, 5);
        let b = random_map(&mut rng, 1, 5, 5);
        let combo = FeatureMap::from_vec(
            1,
            5,
            5,
            a.data().iter().zip(b.data()).map(|(x, y)| 2.0 * x - 0.5 * y).collect(),
        );
        let wa = warp_forward(&a, &h).unwrap();
        let wb = warp_forward(&b, &h).unwrap();
        let wc = warp_forward(&combo, &h).unwrap();
        for i in 0..wc.data().len() {
            let expect = 2.0 * wa.data()[i] - 0.5 * wb.data()[i];
            assert!((wc.data()[i] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn channel_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_homography(&mut rng, view(5, 5), view(5, 5));
        let fm = random_map(&mut rng, 3, 5, 5);
        let all = warp_forward(&fm, &h).unwrap();
        for c in 0..3 {
            let single = FeatureMap::from_vec(
                1,
                5,
                5,
                (0..25).map(|i| fm.data()[c * 25 + i]).collect(),
            );
            let w = warp_forward(&single, &h).unwrap();
            for i in 0..25 {
                assert_eq!(w.data()[i], all.data()[c * 25 + i]);
            }
        }
    }

    #[test]
    fn stride_scaling_translation() {
        let src = view(8, 8);
        let m = Mat3::from_rows([1.0, 0.0, 3.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]);
        let h = Homography::new(m, src, src).unwrap();
        let unchanged = scale_homography_for_stride(&h, 1).unwrap();
        assert!(unchanged.matrix().projective_distance(h.matrix()) < 1e-15);
        let scaled = scale_homography_for_stride(&h, 2).unwrap();
        let expect = Mat3::from_rows([1.0, 0.0, 1.5], [0.0, 1.0, 0.5], [0.0, 0.0, 1.0]);
        assert!(scaled.matrix().projective_distance(&expect) < 1e-12);
        assert_eq!(scaled.source.width, 4);
        assert_eq!(scaled.target.height, 4);
    }

    #[test]
    fn stride_scaling_tracks_impulse() {
        // oracle: warp at full resolution, then downsample the peak location
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let full = view(32, 32);
            let h = random_homography(&mut rng, full, full);
            let mut fm = FeatureMap::zeros(1, 32, 32);
            // stride-aligned so the downsampled impulse lands exactly on a cell
            let (iy, ix) = (4 * rng.gen_range(2..6), 4 * rng.gen_range(2..6));
            *fm.at_mut(0, iy, ix) = 1.0;
            let warped = warp_forward(&fm, &h).unwrap();
            let peak_full = (0..32 * 32)
                .max_by(|&a, &b| warped.data()[a].partial_cmp(&warped.data()[b]).unwrap())
                .unwrap();
            if warped.data()[peak_full] < 0.1 {
                continue; // impulse left the frame
            }
            let (py, px) = (peak_full / 32, peak_full % 32);

            let h4 = scale_homography_for_stride(&h, 4).unwrap();
            let mut small = FeatureMap::zeros(1, 8, 8);
            *small.at_mut(0, iy / 4, ix / 4) = 1.0;
            let warped4 = warp_forward(&small, &h4).unwrap();
            let peak4 = (0..8 * 8)
                .max_by(|&a, &b| warped4.data()[a].partial_cmp(&warped4.data()[b]).unwrap())
                .unwrap();
            let (qy, qx) = (peak4 / 8, peak4 % 8);
            assert!((qy as f64 - py as f64 / 4.0).abs() <= 1.0);
            assert!((qx as f64 - px as f64 / 4.0).abs() <= 1.0);
        }
    }

    #[test]
    fn gaussian_roundtrip_psnr() {
        // smooth blob survives warp + inverse warp in the interior
        let n = 48usize;
        let mut fm = FeatureMap::zeros(1, n, n);
        for y in 0..n {
            for x in 0..n {
                let dx = (x as f64 - n as f64 / 2.0) / 8.0;
                let dy = (y as f64 - n as f64 / 2.0) / 8.0;
                *fm.at_mut(0, y, x) = (-0.5 * (dx * dx + dy * dy)).exp();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = view(n as u32, n as u32);
        let h = random_homography(&mut rng, v, v);
        let hinv = h.inverse().unwrap();
        let there = warp_forward(&fm, &h).unwrap();
        let back = warp_forward(&there, &hinv).unwrap();

        // interior = round-trip sample points at least 2 px inside bounds
        let mut se = 0.0;
        let mut count = 0usize;
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = h.apply(x as f64, y as f64).unwrap();
                if fx < 2.0 || fy < 2.0 || fx > n as f64 - 3.0 || fy > n as f64 - 3.0 {
                    continue;
                }
                let d = back.at(0, y, x) - fm.at(0, y, x);
                se += d * d;
                count += 1;
            }
        }
        assert!(count > 100);
        let mse = se / count as f64;
        let psnr = 10.0 * (1.0 / mse).log10();
        assert!(psnr >= 30.0, "psnr {psnr}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let fm = FeatureMap::<f64>::zeros(1, 3, 3);
        let h = Homography::identity(view(5, 5));
        assert!(matches!(warp_forward(&fm, &h), Err(WarpError::ShapeMismatch { .. })));
        assert!(matches!(
            warp_backward(&fm, &h, (1, 3, 3)),
            Err(WarpError::ShapeMismatch { .. })
        ));
    }
}
