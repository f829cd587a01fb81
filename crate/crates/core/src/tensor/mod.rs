//! Dense row-major tensors (last dimension fastest), the manual-backward
//! operations built on them, and the `HOIT` binary file format.

mod format;
pub mod ops;

pub use format::{DynTensor, FORMAT_VERSION, MAGIC};

use crate::error::{HoiError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return Err(HoiError::InvalidDims(dims.to_vec()));
    }
    Ok(dims.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let n = check_dims(&dims)?;
        if n != data.len() {
            return Err(HoiError::Shape {
                op: "Tensor::new",
                lhs: dims,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let dims = dims.into();
        let n = check_dims(&dims)?;
        Ok(Tensor {
            dims,
            data: vec![value; n],
        })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let dims = dims.into();
        let n = check_dims(&dims)?;
        Ok(Tensor {
            dims,
            data: (0..n).map(f).collect(),
        })
    }

    /// Zero tensor with the same dims. Never fails since `self` is valid.
    pub fn zeros_like(&self) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let n = check_dims(&dims)?;
        if n != self.data.len() {
            return Err(HoiError::shape("reshape", &self.dims, &dims));
        }
        Ok(Tensor {
            dims,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_dims("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.expect_same_dims("axpy", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub(crate) fn expect_same_dims(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(HoiError::shape(op, &self.dims, &other.dims));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.dims.len() != rank {
            return Err(HoiError::InvalidArgument(format!(
                "{op}: expected rank {rank}, got dims {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// `[h, w, c]` of a rank-3 tensor.
    pub(crate) fn hwc(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        self.expect_rank(op, 3)?;
        Ok((self.dims[0], self.dims[1], self.dims[2]))
    }

    pub(crate) fn from_parts_unchecked(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }
}
