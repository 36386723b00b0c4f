//! Dense NCHW tensors and convolution geometry.

use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};

/// Floating-point element type. `f32` is the training precision; `f64` and
/// double-double serve gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const BITS: u32;

    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite conversion")
    }
}

impl Real for f32 {
    const BITS: u32 = 32;
}

impl Real for f64 {
    const BITS: u32 = 64;
}

/// Double-double (about 106-bit significand), used for reference values.
/// The crate's `FromPrimitive::from_f64` truncates to an integer, so both
/// conversions go through the exact `From` impls.
impl Real for twofloat::TwoFloat {
    const BITS: u32 = 128;

    #[inline]
    fn of(x: f64) -> Self {
        twofloat::TwoFloat::from(x)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

/// Shape of a 4-D tensor in (batch, channel, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
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

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(HgError::config(format!(
                "tensor dimensions must be >= 1, got {self}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
    pub requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape4) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(HgError::config(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape4::scalar(), value)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer; its length must match the data.
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(HgError::config(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn reshape(&self, shape: Shape4) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(HgError::config(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    /// Extracts sample `i` of the batch as a 1×C×H×W tensor.
    pub fn sample(&self, i: usize) -> Self {
        let s = self.shape;
        let len = s.c * s.plane();
        let data = self.data[i * len..(i + 1) * len].to_vec();
        Self {
            shape: Shape4::new(1, s.c, s.h, s.w),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Stacks 1×C×H×W tensors (or larger batches) along the batch axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| HgError::config("cannot stack an empty list"))?;
        let s = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let ps = p.shape;
            if (ps.c, ps.h, ps.w) != (s.c, s.h, s.w) {
                return Err(HgError::config(format!(
                    "cannot stack {ps} with {s}: channel/spatial mismatch"
                )));
            }
            n += ps.n;
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(Shape4::new(n, s.c, s.h, s.w), data)
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Geometry of a 2-D convolution, including the dilation factor.
///
/// A dilation of 1 is an ordinary convolution; dilation `l` spaces the kernel
/// taps `l` pixels apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square stride-1 convolution with "same" padding for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: (1, 1),
            padding: (k / 2, k / 2),
            dilation: 1,
            groups: 1,
            has_bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1)
    }

    /// Depthwise 3×3 with the given dilation; padding keeps h and w.
    pub fn depthwise3x3(channels: usize, dilation: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (dilation, dilation),
            dilation,
            groups: channels,
            has_bias: false,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel.0,
            self.kernel.1,
        )
    }

    pub fn weight_numel(&self) -> usize {
        self.weight_shape().numel()
    }

    pub fn param_count(&self) -> usize {
        self.weight_numel() + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(HgError::config("convolution channels must be positive"));
        }
        if self.groups == 0 {
            return Err(HgError::config("convolution groups must be positive"));
        }
        if self.in_channels % self.groups != 0 {
            return Err(HgError::config(format!(
                "in_channels {} not divisible by groups {}",
                self.in_channels, self.groups
            )));
        }
        if self.out_channels % self.groups != 0 {
            return Err(HgError::config(format!(
                "out_channels {} not divisible by groups {}",
                self.out_channels, self.groups
            )));
        }
        if self.dilation == 0 {
            return Err(HgError::config("dilation must be >= 1"));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(HgError::config("kernel and stride must be >= 1"));
        }
        Ok(())
    }

    /// `floor((x + 2p - l(k-1) - 1) / s) + 1`, or `None` if it would be < 1.
    pub fn output_dim(x: usize, k: usize, s: usize, p: usize, l: usize) -> Option<usize> {
        let span = l * (k - 1) + 1;
        let padded = x + 2 * p;
        if padded < span {
            return None;
        }
        Some((padded - span) / s + 1)
    }

    /// Output shape for `input`, checking channel and spatial compatibility.
    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(HgError::config(format!(
                "input channel dimension is {} but convolution expects {}",
                input.c, self.in_channels
            )));
        }
        let h = Self::output_dim(
            input.h,
            self.kernel.0,
            self.stride.0,
            self.padding.0,
            self.dilation,
        )
        .ok_or_else(|| {
            HgError::config(format!(
                "height {} too small for kernel {} at dilation {} and padding {}",
                input.h, self.kernel.0, self.dilation, self.padding.0
            ))
        })?;
        let w = Self::output_dim(
            input.w,
            self.kernel.1,
            self.stride.1,
            self.padding.1,
            self.dilation,
        )
        .ok_or_else(|| {
            HgError::config(format!(
                "width {} too small for kernel {} at dilation {} and padding {}",
                input.w, self.kernel.1, self.dilation, self.padding.1
            ))
        })?;
        Ok(Shape4::new(input.n, self.out_channels, h, w))
    }

    /// Multiply-accumulates for one image at the given input shape.
    pub fn madds(&self, input: Shape4) -> Result<u64> {
        let out = self.output_shape(input)?;
        let per_out = (self.kernel.0 * self.kernel.1 * (self.in_channels / self.groups)) as u64;
        Ok((out.h * out.w * out.c) as u64 * per_out)
    }
}
