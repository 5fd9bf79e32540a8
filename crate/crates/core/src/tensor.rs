//! Dense row-major tensors.
//!
//! Activations are 5-axis volumes laid out as `(batch, depth, height, width,
//! channels)` with channels innermost, so every per-voxel channel vector is a
//! contiguous slice.

use num_complex::Complex;
use num_traits::Zero;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

/// Complex-valued tensor, stored as interleaved `(re, im)` pairs.
pub type ComplexTensor<T> = Tensor<Complex<T>>;

/// Named view of a 5-axis volume shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims5 {
    pub b: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims5 {
    pub fn spatial(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.b, self.d, self.h, self.w, self.c]
    }
}

impl<E: Copy> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::config(format!(
                "tensor shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::config(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map<F: Copy>(&self, f: impl Fn(E) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::config(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Interprets the tensor as a `(B, D, H, W, C)` volume.
    pub fn dims5(&self) -> Result<Dims5> {
        match self.shape[..] {
            [b, d, h, w, c] => Ok(Dims5 { b, d, h, w, c }),
            _ => Err(Error::config(format!(
                "expected a 5-axis (B, D, H, W, C) volume, got shape {:?}",
                self.shape
            ))),
        }
    }
}

impl<E: Copy + Zero> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
    }
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn max_abs_diff_c(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(T::zero(), T::max))
    }

    /// Packs a complex tensor into a real one with a trailing `(re, im)` axis.
    pub fn to_real_pairs(&self) -> Tensor<T> {
        let mut shape = self.shape.clone();
        shape.push(2);
        let data = self.data.iter().flat_map(|z| [z.re, z.im]).collect();
        Tensor { shape, data }
    }

    /// Inverse of [`to_real_pairs`](Self::to_real_pairs).
    pub fn from_real_pairs(t: &Tensor<T>) -> Result<Self> {
        if t.shape.last() != Some(&2) {
            return Err(Error::config(format!(
                "expected a trailing (re, im) axis of length 2, got shape {:?}",
                t.shape
            )));
        }
        let shape = t.shape[..t.shape.len() - 1].to_vec();
        let data = t
            .data
            .chunks_exact(2)
            .map(|p| Complex::new(p[0], p[1]))
            .collect();
        Ok(Tensor { shape, data })
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
