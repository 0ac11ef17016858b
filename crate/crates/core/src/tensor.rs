//! Dense row-major tensors with shared storage.
//!
//! `Tensor` is a shape plus an `Arc` of flat data, so clones are O(1) and
//! mutation is copy-on-write. All layout is row-major; reshape is free.

use std::sync::Arc;

use rand::Rng;

use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Clone)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "element count {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn scalar(v: E) -> Self {
        Tensor::from_vec(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(shape.to_vec(), vec![E::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Tensor::from_vec(shape.to_vec(), vec![v; shape.iter().product()])
    }

    /// Standard-normal samples. Values are drawn in f64 and converted, so the
    /// stream is bit-for-bit identical across element types.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let dist = rand_distr::StandardNormal;
        let data: Vec<E> =
            (0..n).map(|_| E::from_f64(rng.sample::<f64, _>(dist))).collect();
        Tensor::from_vec(shape.to_vec(), data)
    }

    /// Truncated normal: std-normal draws with |z| > 2 resampled, times `std`.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let dist = rand_distr::StandardNormal;
        let data: Vec<E> = (0..n)
            .map(|_| {
                let mut z: f64 = rng.sample(dist);
                while z.abs() > 2.0 {
                    z = rng.sample(dist);
                }
                E::from_f64(z * std)
            })
            .collect();
        Tensor::from_vec(shape.to_vec(), data)
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data: Vec<E> = (0..n).map(|_| E::from_f64(rng.gen_range(lo..hi))).collect();
        Tensor::from_vec(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable view; copies the storage iff it is shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.len());
        Tensor { shape, data: self.data.clone() }
    }

    pub fn item(&self) -> E {
        assert_eq!(self.len(), 1, "item() on tensor of {} elements", self.len());
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, E> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|v| v.to_f64s()).collect())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor::from_vec(
            self.shape.clone(),
            self.data.iter().map(|v| v.to_f64s() as f32).collect(),
        )
    }

    pub fn sq_l2(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64s() * v.to_f64s()).sum()
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{what} element {i} = {v}")));
            }
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64s().to_bits() == b.to_f64s().to_bits())
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cow_clone_is_isolated() {
        let a: Tensor<f32> = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut b = a.clone();
        b.data_mut()[0] = 9.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 9.0);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }

    #[test]
    fn randn_stream_matches_across_dtypes() {
        let mut r1 = crate::rng::substream(3, "x");
        let mut r2 = crate::rng::substream(3, "x");
        let a: Tensor<f32> = Tensor::randn(&[8], &mut r1);
        let b: Tensor<f64> = Tensor::randn(&[8], &mut r2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
