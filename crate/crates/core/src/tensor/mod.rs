//! Dense row-major tensors and the numeric kernels the autodiff graph is built on.
//!
//! A [`Tensor`] is an immutable value: a shape plus a shared, contiguous buffer.
//! Cloning is cheap (the buffer is reference counted) and every kernel returns
//! a freshly materialized result.

mod kernels;
mod layout;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

pub use kernels::{conv2d_output_shape, Conv2dSpec};

/// Floating point element type. Training and inference run in `f32`, gradient checks in `f64`.
pub trait Element:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    fn c(v: f64) -> Self;

    fn f64(self) -> f64;
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn c(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn c(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("division by zero in divisor element {index}")]
    DivisionByZero { index: usize },
    #[error("axis {axis} is invalid for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("channels {channels} not divisible by groups {groups}")]
    GroupMismatch { channels: usize, groups: usize },
    #[error("channel count {channels} not divisible by {factor}")]
    ChannelNotDivisible { channels: usize, factor: usize },
    #[error("spatial size {height}x{width} not divisible by {window}")]
    NotDivisible {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("odd spatial dimension {height}x{width}")]
    OddDimension { height: usize, width: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss node {0} does not depend on any value that requires grad")]
    DetachedNode(usize),
    #[error("spatial attention requires a relative position bias")]
    MissingBias,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "..")?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast `target` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_parts(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self::from_parts(shape, data)
    }

    /// Converts from `f64` values, rounding into `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::c(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|d| (*d).clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::c(v.f64())).collect(),
        )
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let off = index
            .iter()
            .zip(strides(&self.shape))
            .map(|(i, s)| i * s)
            .sum::<usize>();
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Same-shape elementwise combination.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    /// Broadcasting elementwise combination.
    pub fn broadcast_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        let out_shape = broadcast_shapes(&self.shape, &other.shape).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }
        })?;
        let n = numel(&out_shape);
        if other.numel() == 1 {
            let b = other.data[0];
            let mut out = Vec::with_capacity(n);
            let reps = n / self.numel().max(1);
            for _ in 0..reps {
                out.extend(self.data.iter().map(|&a| f(a, b)));
            }
            return Ok(Self::from_parts(out_shape, out));
        }
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut out = Vec::with_capacity(n);
        let rank = out_shape.len();
        let last = out_shape[rank - 1];
        let (la, lb) = (sa[rank - 1], sb[rank - 1]);
        let mut idx = vec![0usize; rank];
        let (a, b) = (&self.data, &other.data);
        for _ in 0..n / last.max(1) {
            let mut oa = 0;
            let mut ob = 0;
            for d in 0..rank - 1 {
                oa += idx[d] * sa[d];
                ob += idx[d] * sb[d];
            }
            for j in 0..last {
                out.push(f(a[oa + j * la], b[ob + j * lb]));
            }
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self::from_parts(out_shape, out))
    }

    /// Sums a broadcast gradient back down to `shape`.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let target = broadcast_strides(shape, &self.shape);
        let mut out = vec![T::zero(); numel(shape)];
        let rank = self.shape.len();
        if rank == 0 {
            out[0] = self.data[0];
            return Self::from_parts(shape.to_vec(), out);
        }
        let mut idx = vec![0usize; rank];
        let last = self.shape[rank - 1];
        let lt = target[rank - 1];
        for chunk in self.data.chunks(last.max(1)) {
            let mut off = 0;
            for d in 0..rank - 1 {
                off += idx[d] * target[d];
            }
            for (j, &v) in chunk.iter().enumerate() {
                out[off + j * lt] += v;
            }
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self::from_parts(shape.to_vec(), out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.broadcast_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.broadcast_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.broadcast_map(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        if let Some(index) = other.data.iter().position(|v| v.is_zero()) {
            return Err(TensorError::DivisionByZero { index });
        }
        self.broadcast_map(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::c(self.numel() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: self.rank(),
            });
        }
        Ok(())
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis)?;
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Self::from_parts(shape, out))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let n = T::c(self.shape.get(axis).copied().unwrap_or(1) as f64);
        Ok(self.sum_axis(axis)?.map(|v| v / n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_elementwise() {
        let a = Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_f64([2], &[3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn scalar_zero_broadcast_absorbs() {
        let a = Tensor::<f32>::from_f64([2, 2], &[1.0, -2.0, 3.0, 4.5]).unwrap();
        let z = Tensor::scalar(0.0f32);
        let p = a.mul(&z).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn incompatible_broadcast_is_error() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([2]);
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn div_by_zero_reported() {
        let a = Tensor::<f32>::ones([3]);
        let b = Tensor::<f32>::from_f64([3], &[1.0, 0.0, 2.0]).unwrap();
        assert_eq!(a.div(&b), Err(TensorError::DivisionByZero { index: 1 }));
    }

    #[test]
    fn broadcast_middle_axis_and_reduce_back() {
        let a = Tensor::<f64>::from_fn([2, 3, 2], |i| i as f64);
        let b = Tensor::<f64>::from_f64([3, 1], &[10.0, 20.0, 30.0]).unwrap();
        let s = a.add(&b).unwrap();
        assert_eq!(s.at(&[1, 2, 1]), 11.0 + 30.0);
        let back = Tensor::<f64>::ones([2, 3, 2]).sum_to_shape(&[3, 1]);
        assert_eq!(back.data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn sum_axis_keeps_dim() {
        let a = Tensor::<f64>::from_fn([2, 3], |i| i as f64);
        let s = a.sum_axis(1).unwrap();
        assert_eq!(s.shape(), &[2, 1]);
        assert_eq!(s.data(), &[3.0, 12.0]);
        assert!(matches!(a.sum_axis(2), Err(TensorError::InvalidAxis { .. })));
    }
}
