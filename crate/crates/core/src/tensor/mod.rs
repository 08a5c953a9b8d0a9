//! Dense NCHW tensors and the raw numeric kernels built on them.
//!
//! A [`Tensor`] is an owned, contiguous, row-major buffer plus a [`Shape`].
//! There are no views or strides; every kernel returns a fresh tensor.

mod conv;
mod ops;
pub mod reference;

pub use conv::{conv2d, conv2d_backward, Conv2dGrads};
pub use ops::{
    add, argmax_channel, avgpool2x2, avgpool2x2_backward, broadcast_gate, concat_channels,
    global_avgpool, global_avgpool_backward, matvec, mul, relu, scale, slice_channels,
    spatial_softmax, spatial_softmax_backward, upsample_nearest_2x, upsample_nearest_2x_backward,
};

pub(crate) use ops::as_matrix as ops_as_matrix;

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ordered list of positive extents.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidShape {
                op: "shape",
                msg: "a shape needs at least one axis".into(),
            });
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "shape",
                msg: format!("extent of axis {axis} is zero"),
            });
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape {
                op: "shape",
                msg: "element count overflows usize".into(),
            })?;
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// True when every extent is 1 (a scalar in any rank).
    pub fn is_scalar(&self) -> bool {
        self.0.iter().all(|&d| d == 1)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                msg: format!("shape {shape} needs {} elements, got {}", shape.numel(), data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on an invalid shape.
    pub fn full(dims: &[usize], value: T) -> Self {
        let shape = Shape::new(dims).expect("valid shape");
        let data = vec![value; shape.numel()];
        Tensor { shape, data }
    }

    /// Panics on an invalid shape.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Builds a tensor by evaluating `f` at every flat index. Panics on an
    /// invalid shape.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let shape = Shape::new(dims).expect("valid shape");
        let data = (0..shape.numel()).map(f).collect();
        Tensor { shape, data }
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// The single element of a scalar-shaped tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Returns the four extents of a rank-4 tensor.
    pub fn nchw(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.dims() {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::InvalidShape {
                op,
                msg: format!("expected an NCHW tensor, got shape {}", self.shape),
            }),
        }
    }

    /// Element at `[n, c, i, j]` of a rank-4 tensor. Panics when out of range.
    pub fn at4(&self, n: usize, c: usize, i: usize, j: usize) -> T {
        let d = self.dims();
        assert_eq!(d.len(), 4, "at4 on a rank-{} tensor", d.len());
        self.data[((n * d[1] + c) * d[2] + i) * d[3] + j]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                msg: format!("cannot reshape {} into {shape}", self.shape),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Fails on the first NaN or infinity.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<T> {
        (self.shape == other.shape).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
        })
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn check_axis(
    op: &'static str,
    axis: &'static str,
    expected: usize,
    got: usize,
) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            axis,
            expected,
            got,
        })
    }
}

pub(crate) fn check_same_shape<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::InvalidShape {
            op,
            msg: format!("operands have shapes {} and {}", a.shape(), b.shape()),
        })
    }
}
