//! Dense rank-4 tensors and the kernels the network blocks need.

pub mod autodiff;
pub mod conv;
pub mod gradcheck;
mod lanes;
pub mod ops;
pub mod param;

use std::fmt::{self, Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, check_divisible, Error, Result};

/// Floating point element type. Storage and compute use `f32`; the gradient
/// checker instantiates the same kernels with `f64`.
pub trait Scalar: Float + FromPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `(batch, channels, rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one spatial plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one sample.
    pub const fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Contiguous NCHW tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Shape4,
    data: Vec<S>,
}

impl<S: Debug> Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} ", self.shape)?;
        if self.data.len() <= 16 {
            f.debug_list().entries(&self.data).finish()
        } else {
            write!(f, "[{} values]", self.data.len())
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Shape4, data: Vec<S>) -> Result<Self> {
        for (dim, v) in [("n", shape.n), ("c", shape.c), ("h", shape.h), ("w", shape.w)] {
            if v == 0 {
                return Err(Error::invalid("tensor", format!("dimension {dim} must be >= 1")));
            }
        }
        check_dim("tensor", "data length", shape.len(), data.len())?;
        Ok(Self { shape, data })
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<S>) -> Result<Self> {
        Self::new(Shape4::new(n, c, h, w), data)
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: Shape4) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: Shape4, value: S) -> Self {
        assert!(!shape.is_empty(), "tensor dimensions must be >= 1");
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self::full(Shape4::new(1, 1, 1, 1), value)
    }

    /// Fill from `f(n, c, y, x)`.
    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: Shape4, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::lit(z * std)
            })
            .collect();
        Self { shape, data }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape4, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| S::lit(rng.random_range(lo..hi))).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: S) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    pub fn sample(&self, n: usize) -> &[S] {
        let s = self.shape.sample();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [S] {
        let s = self.shape.sample();
        &mut self.data[n * s..(n + 1) * s]
    }

    /// One spatial plane `(n, c)`.
    pub fn plane(&self, n: usize, c: usize) -> &[S] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        check_same_shape("zip_map", self.shape, other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        check_same_shape("add_assign", self.shape, other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Element-type conversion (e.g. 32-bit model to a 64-bit replica).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}

pub(crate) fn check_same_shape(op: &'static str, a: Shape4, b: Shape4) -> Result<()> {
    check_dim(op, "batch", a.n, b.n)?;
    check_dim(op, "channels", a.c, b.c)?;
    check_dim(op, "height", a.h, b.h)?;
    check_dim(op, "width", a.w, b.w)
}

/// Convolution filters with shape `(out_channels, in_channels_per_group, kh, kw)`.
///
/// Biases are optional and unused by the network builders; batch normalization
/// supplies the shift.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<S = f32> {
    pub weight: Tensor<S>,
    pub groups: usize,
    pub bias: Option<Vec<S>>,
}

impl<S: Scalar> ConvWeights<S> {
    pub fn new(weight: Tensor<S>, groups: usize) -> Result<Self> {
        if groups == 0 {
            return Err(Error::invalid("conv weights", "groups must be >= 1"));
        }
        check_divisible("conv weights", "out_channels", weight.shape().n, groups)?;
        Ok(Self {
            weight,
            groups,
            bias: None,
        })
    }

    pub fn zeros(out_channels: usize, in_per_group: usize, kh: usize, kw: usize, groups: usize) -> Result<Self> {
        Self::new(Tensor::zeros(Shape4::new(out_channels, in_per_group, kh, kw)), groups)
    }

    /// Fan-in scaled Gaussian, `std = sqrt(2 / fan_in)`.
    pub fn kaiming<R: Rng + ?Sized>(
        out_channels: usize,
        in_per_group: usize,
        kh: usize,
        kw: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_per_group * kh * kw;
        let std = (2.0 / fan_in as f64).sqrt();
        Self::new(
            Tensor::randn(Shape4::new(out_channels, in_per_group, kh, kw), std, rng),
            groups,
        )
    }

    pub fn with_bias(mut self, bias: Vec<S>) -> Result<Self> {
        check_dim("conv weights", "bias length", self.out_channels(), bias.len())?;
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_per_group(&self) -> usize {
        self.weight.shape().c
    }

    pub fn in_channels(&self) -> usize {
        self.in_per_group() * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape().h, self.weight.shape().w)
    }

    /// Number of scalar parameters, biases included.
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// `1x1` filter with `W[o][i] = delta(o, i)`.
    pub fn identity(channels: usize) -> Self {
        let w = Tensor::from_fn(Shape4::new(channels, channels, 1, 1), |o, i, _, _| {
            if o == i {
                S::one()
            } else {
                S::zero()
            }
        });
        Self {
            weight: w,
            groups: 1,
            bias: None,
        }
    }
}
