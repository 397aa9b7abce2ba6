//! Dense n-dimensional tensor with row-major `Vec` storage.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor: `shape` plus a flat row-major buffer with
/// `data.len() == shape.iter().product()`.
///
/// Tensors are immutable in all public graph operations; ops return
/// new tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor::new",
                format!(
                    "shape {:?} wants {} elements, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::shape(
                "tensor::new",
                format!("zero dim in {:?}", shape),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        Self::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Leading dimension (batch size for model tensors).
    pub fn dim0(&self) -> usize {
        self.shape[0]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        debug_assert_eq!(self.shape.len(), 2);
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    /// All elements but the leading dim, flattened per-sample length.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Flat slice for sample `i` along the leading dimension.
    pub fn sample(&self, i: usize) -> &[S] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Stack per-sample tensors along a new leading dimension.
    pub fn stack(samples: &[Tensor<S>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::shape("tensor::stack", "empty input".to_string()))?;
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(samples.len() * first.numel());
        for s in samples {
            if s.shape() != first.shape() {
                return Err(Error::shape(
                    "tensor::stack",
                    format!("mixed shapes {:?} vs {:?}", first.shape(), s.shape()),
                ));
            }
            data.extend_from_slice(s.data());
        }
        Tensor::new(shape, data)
    }

    /// Rows `lo..hi` along the leading dimension.
    pub fn slice_dim0(&self, lo: usize, hi: usize) -> Self {
        let n = self.sample_len();
        let mut shape = self.shape.clone();
        shape[0] = hi - lo;
        Tensor {
            shape,
            data: self.data[lo * n..hi * n].to_vec(),
        }
    }
}

impl Tensor<f32> {
    /// Lossless widening; used by f64-side checks in tests.
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_len() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn stack_and_slice_roundtrip() {
        let a = Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0f32, 4.0]).unwrap();
        let s = Tensor::stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.slice_dim0(1, 2).data(), &[3.0, 4.0]);
    }
}
