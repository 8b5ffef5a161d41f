//! Adam with decoupled weight decay, the optimizer the training loop uses.

use super::tensor::Tensor;
use super::AutodiffError;
use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Real> Default for AdamHyper<T> {
    /// Training hyperparameters: lr 4e-5, batch-friendly beta1 0.95,
    /// weight decay 5e-4.
    fn default() -> Self {
        Self {
            lr: T::of(4e-5),
            beta1: T::of(0.95),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            weight_decay: T::of(5e-4),
        }
    }
}

/// Per-parameter moment accumulators plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub hyper: AdamHyper<T>,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(hyper: AdamHyper<T>, param_shapes: &[&[usize]]) -> Self {
        Self {
            hyper,
            step: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One bias-corrected update. Gradients must line up with the parameters
    /// one-to-one in both count and shape.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<(), AutodiffError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(self.m.iter().zip(&self.v))
        {
            if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "adam: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let h = self.hyper;
        let t = T::from_u64(self.step).unwrap();
        let bias1 = T::one() - h.beta1.powf(t);
        let bias2 = T::one() - h.beta2.powf(t);
        for i in 0..params.len() {
            let pd = params[i].data_mut();
            let gd = grads[i].data();
            let md = self.m[i].data_mut();
            let vd = self.v[i].data_mut();
            for j in 0..pd.len() {
                let g = gd[j];
                md[j] = h.beta1 * md[j] + (T::one() - h.beta1) * g;
                vd[j] = h.beta2 * vd[j] + (T::one() - h.beta2) * g * g;
                let m_hat = md[j] / bias1;
                let v_hat = vd[j] / bias2;
                pd[j] = pd[j]
                    - h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * pd[j]);
            }
        }
        Ok(())
    }
}
