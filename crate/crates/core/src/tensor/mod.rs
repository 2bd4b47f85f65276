//! Dense row-major tensors over `f32`/`f64`, plus the reverse-mode autodiff
//! tape ([`Graph`]) covering exactly the operator set the GRL stack needs.

pub mod alloc;
pub mod flops;
mod graph;
pub mod io;
pub mod kernels;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use graph::{Gradients, Graph, NodeId, PoolMode};

/// Element types a [`Tensor`] may hold. Implemented for `f32` and `f64` only;
/// the associated code is what the binary container stores.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Send + Sync + 'static
{
    /// Dtype code in the GRLT container: 0 = f32, 1 = f64.
    const DTYPE_CODE: u8;
    /// Width of one encoded element in bytes.
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from an `f64` constant (infallible for f32/f64).
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant converts to scalar")
    }
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// `exp(x)` for `x ≤ 0` (the softmax post-max-shift domain).
    ///
    /// f64 uses libm (oracle precision); f32 uses a polynomial `2^k·2^f`
    /// evaluation that vectorizes, with relative error below f32 softmax
    /// rounding noise. Both are deterministic.
    #[inline]
    fn exp_nonpos(self) -> Self {
        self.exp()
    }
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 0;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    #[inline(always)]
    fn exp_nonpos(self) -> Self {
        // exp(x) = 2^(x·log2e) = 2^k · 2^f, f ∈ [−0.5, 0.5], 2^f by a
        // degree-6 Taylor of e^{f·ln2} (trunc error < 2⁻²³ on the interval).
        // Rounding via the 1.5·2²³ magic constant keeps the loop free of
        // libm calls so it vectorizes on baseline targets.
        const MAGIC: f32 = 12_582_912.0;
        let x = self.max(-80.0);
        let t = x * std::f32::consts::LOG2_E;
        let k = (t + MAGIC) - MAGIC;
        let f = (t - k) * std::f32::consts::LN_2;
        let p = 1.0
            + f * (1.0
                + f * (0.5
                    + f * (0.166_666_67
                        + f * (0.041_666_67 + f * (0.008_333_334 + f * 0.001_388_889)))));
        let bits = (((k as i32) + 127) << 23) as u32;
        let r = p * f32::from_bits(bits);
        // flush the deep tail (masked logits) to exact zero: keeps masked
        // attention weights at 0 and avoids denormal arithmetic downstream
        if self < -80.0 {
            0.0
        } else {
            r
        }
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 1;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense n-dimensional array with row-major layout.
///
/// Invariant: `shape.iter().product() == data.len()`. Ops in this module keep
/// a second invariant — values stay finite; any NaN/Inf is surfaced as
/// [`Error::Numeric`] instead of being silently propagated.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        alloc::record(data.len());
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        alloc::record(numel);
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        alloc::record(numel);
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::full(&[1], value)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// I.i.d. standard-normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: T, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        alloc::record(numel);
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64c(z) * std
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: T, hi: T, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        alloc::record(numel);
        let (lo64, hi64) = (lo.to_f64c(), hi.to_f64c());
        let data = (0..numel)
            .map(|_| T::from_f64c(rng.random_range(lo64..hi64)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Normal(0, std²) resampled until within ±2·std.
    pub fn trunc_normal(shape: &[usize], std: T, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        alloc::record(numel);
        let s = std.to_f64c();
        let data = (0..numel)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break T::from_f64c(z * s);
                }
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.rank() != 3 {
            return Err(Error::shape(format!(
                "expected rank-3 feature map, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "expected rank-2 matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> T {
        self.data[(c * self.shape[1] + i) * self.shape[2] + j]
    }

    /// Same buffer under a new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape, numel, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        alloc::record(self.data.len());
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry (0 for empty tensors).
    pub fn linf(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }
}

/// Named learnable tensor with its gradient accumulator.
///
/// Invariant: `value.shape == gradient.shape`; names are unique within one
/// model's parameter set.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub gradient: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let gradient = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            gradient,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.gradient.data_mut() {
            *g = T::zero();
        }
    }
}

pub(crate) fn ensure_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.is_all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}
