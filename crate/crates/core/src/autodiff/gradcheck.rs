//! Central finite differences against analytic gradients. Test oracle; the
//! acceptance suite also uses it with a deliberately corrupted backward to
//! prove it can fail.

use super::tensor::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per checked input tensor.
    pub max_rel_err: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err.iter().all(|&e| e <= tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares `analytic` gradients of the scalar function `f` at `inputs`
/// against central differences with the given step. `skip(input, element)`
/// can exclude entries near kinks (relu).
pub fn finite_diff_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    step: f64,
    skip: Option<&dyn Fn(usize, usize) -> bool>,
) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    assert_eq!(inputs.len(), analytic.len());
    let mut max_rel_err = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for ti in 0..inputs.len() {
        assert_eq!(inputs[ti].shape(), analytic[ti].shape());
        let mut worst = 0.0f64;
        for ei in 0..inputs[ti].numel() {
            if skip.map(|s| s(ti, ei)).unwrap_or(false) {
                continue;
            }
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let plus = f(&work);
            work[ti].data_mut()[ei] = orig - step;
            let minus = f(&work);
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti].data()[ei];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max((a - numeric).abs() / denom);
        }
        max_rel_err.push(worst);
    }
    GradCheckReport { max_rel_err }
}
