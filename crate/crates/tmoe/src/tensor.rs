//! Dense row-major tensors of rank 1 or 2.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SeedRng;

/// A shaped real array. Row-major storage; rank 1 (`[n]`) or rank 2
/// (`[rows, cols]`). Gradients live on the tape, not here.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.is_empty() || dims.len() > 2 || dims.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("dims must be rank 1 or 2 with positive extents, got {dims:?}"),
            ));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} imply {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(dims: Vec<usize>, value: T) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Gaussian-initialized tensor, `N(0, scale^2)` per element.
    pub fn randn(dims: Vec<usize>, scale: f64, rng: &mut SeedRng) -> Self {
        let numel: usize = dims.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.normal() * scale))
            .collect();
        Tensor { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) view: rank-1 tensors count as a single row.
    pub fn shape2(&self) -> (usize, usize) {
        match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("tensors are rank 1 or 2"),
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, cols) = self.shape2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        let (_, cols) = self.shape2();
        self.data[r * cols + c]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on multi-element tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Lossy precision cast (used by 64-bit verification harnesses).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|x| U::from_f64(x.to_f64()))
    }

    pub fn same_dims(&self, other: &Tensor<T>) -> bool {
        self.dims == other.dims
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("tensor"));
    }

    #[test]
    fn rejects_zero_extent_and_high_rank() {
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2, 2], vec![0.0; 8]).is_err());
    }

    #[test]
    fn shape2_treats_vectors_as_single_row() {
        let v = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(v.shape2(), (1, 3));
        let m = Tensor::<f32>::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.shape2(), (2, 2));
        assert_eq!(m.row(1), &[3.0, 4.0]);
        assert_eq!(m.at(0, 1), 2.0);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::<f64>::randn(vec![4, 4], 0.02, &mut SeedRng::new(7));
        let b = Tensor::<f64>::randn(vec![4, 4], 0.02, &mut SeedRng::new(7));
        assert_eq!(a, b);
    }
}
