//! Dense N-d value array. The gradient slot lives on the tape, not here;
//! parameters held across steps are plain tensors.

use crate::num::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::one(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length must match shape"
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() needs a scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    /// C,H,W accessor for rank-3 tensors.
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }
}
