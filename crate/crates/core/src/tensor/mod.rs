//! Dense 4-D tensors, forward kernels and a tape-based reverse-mode autodiff.
//!
//! Every tensor is laid out as `[n, c, h, w]` in row-major order. Kernels are
//! generic over [`Element`] so the same code runs in `f32` for training and
//! `f64` for finite-difference gradient checks.

mod gradcheck;
pub mod kernels;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_GRAD_CHECK_EPS};
pub use tape::{Op, Tape, Var};

/// Floating scalar a tensor can hold.
pub trait Element:
    Float + FromPrimitive + Send + Sync + Debug + Default + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 fits in every Element")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Element for f32 {}
impl Element for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: [usize; 4],
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "Tensor::new",
                format!("dims {dims:?} need {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            dims,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every position.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self {
            dims,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn is_requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<T>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, ch, h, w] = self.dims;
        ((b * ch + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(b, c, y, x)]
    }

    /// Value of a `[1, 1, 1, 1]` tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss(self.dims));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, dims: [usize; 4]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.dims, &dims));
        }
        self.dims = dims;
        self.grad = None;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch element `b` as an `[1, c, h, w]` tensor.
    pub fn sample(&self, b: usize) -> Tensor<T> {
        let [_, c, h, w] = self.dims;
        let len = c * h * w;
        Tensor {
            dims: [1, c, h, w],
            data: self.data[b * len..(b + 1) * len].to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Stacks `[1, c, h, w]` tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(Error::shape("stack", &first.dims, &t.dims));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::new([n, c, h, w], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Tensor::<f32>::new([1, 2, 2, 2], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn index_is_row_major() {
        let t = Tensor::<f64>::from_fn([2, 3, 4, 5], |b, c, y, x| (b * 1000 + c * 100 + y * 10 + x) as f64);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.index(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.data()[119], 1234.0);
    }

    #[test]
    fn stack_and_sample_invert() {
        let t = Tensor::<f32>::from_fn([3, 2, 2, 2], |b, c, y, x| (b + c + y + x) as f32);
        let parts: Vec<_> = (0..3).map(|b| t.sample(b)).collect();
        assert_eq!(Tensor::stack(&parts).unwrap(), t);
    }
}
