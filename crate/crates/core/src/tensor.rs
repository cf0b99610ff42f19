//! Dense row-major tensors (rank 1 to 4, batch x channel x height x width).
//!
//! Tensors are plain values: every operation returns a new tensor and checks
//! that no NaN or infinity escaped.

use std::fmt::{self, Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Runtime-selectable floating point precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Single precision, used for benchmark runs.
    #[default]
    F32,
    /// Double precision, used for verification runs.
    F64,
}

impl Precision {
    pub const ENV_VAR: &'static str = "ATTRIB_PRECISION";

    /// Reads `ATTRIB_PRECISION`; unset means single precision.
    pub fn from_env() -> Result<Self> {
        match std::env::var(Self::ENV_VAR) {
            Ok(v) => v.parse(),
            Err(_) => Ok(Precision::F32),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::invalid(format!(
                "unknown precision {other:?} (expected f32 or f64)"
            ))),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Element type of a [`Tensor`]; implemented for `f32` and `f64`.
pub trait Scalar:
    Float + Default + Debug + Display + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` must hold exactly `PRECISION.byte_width()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Exp,
}

/// Right-hand operand of a binary elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

impl<'a, T> From<&'a Tensor<T>> for Operand<'a, T> {
    fn from(t: &'a Tensor<T>) -> Self {
        Operand::Tensor(t)
    }
}

impl<T: Scalar> From<T> for Operand<'_, T> {
    fn from(v: T) -> Self {
        Operand::Scalar(v)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be between 1 and 4".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("holds {n} elements but {} were given", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Tensor { shape, data })
    }

    /// Caller guarantees the shape/data invariants.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("Tensor::full"));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.len() {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Element at a multi-index; panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank");
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            assert!(
                i < extent,
                "index {index:?} out of bounds for {:?}",
                self.shape
            );
            flat = flat * extent + i;
        }
        self.data[flat]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn min(&self) -> Option<T> {
        self.data.iter().copied().reduce(T::min)
    }

    pub fn max(&self) -> Option<T> {
        self.data.iter().copied().reduce(T::max)
    }

    /// Index of the first maximal element.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, T)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i)
    }

    fn checked(self, what: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn binary<'a>(&self, op: BinaryOp, rhs: impl Into<Operand<'a, T>>) -> Result<Self> {
        let data = match rhs.into() {
            Operand::Scalar(b) => self.data.iter().map(|&a| op.apply(a, b)).collect(),
            Operand::Tensor(b) => {
                if b.shape != self.shape {
                    return Err(Error::ShapeMismatch {
                        left: self.shape.clone(),
                        right: b.shape.clone(),
                    });
                }
                self.data
                    .iter()
                    .zip(&b.data)
                    .map(|(&a, &b)| op.apply(a, b))
                    .collect()
            }
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .checked("elementwise")
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Self> {
        let data = match op {
            UnaryOp::Relu => self.data.iter().map(|&v| v.max(T::zero())).collect(),
            UnaryOp::Exp => self.data.iter().map(|&v| v.exp()).collect(),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .checked("elementwise")
    }

    pub fn add<'a>(&self, rhs: impl Into<Operand<'a, T>>) -> Result<Self> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub<'a>(&self, rhs: impl Into<Operand<'a, T>>) -> Result<Self> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul<'a>(&self, rhs: impl Into<Operand<'a, T>>) -> Result<Self> {
        self.binary(BinaryOp::Mul, rhs)
    }

    pub fn div<'a>(&self, rhs: impl Into<Operand<'a, T>>) -> Result<Self> {
        self.binary(BinaryOp::Div, rhs)
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(UnaryOp::Relu)
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary(UnaryOp::Exp)
    }

    /// Global average pooling of a `C x H x W` tensor to a length-`C` vector.
    pub fn reduce_mean_spatial(&self) -> Result<Self> {
        let &[c, h, w] = self.shape.as_slice() else {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "spatial mean needs a rank-3 C x H x W tensor".into(),
            });
        };
        if h * w == 0 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "empty spatial extent".into(),
            });
        }
        let z = T::of((h * w) as f64);
        let data = self
            .data
            .chunks_exact(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() / z)
            .collect();
        Tensor {
            shape: vec![c],
            data,
        }
        .checked("reduce_mean_spatial")
    }

    /// Align-corners bilinear interpolation of an `H x W` map, or of every
    /// channel of a `C x H x W` tensor.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize target must be at least 1x1"));
        }
        let (channels, h, w) = match self.shape.as_slice() {
            &[h, w] => (1, h, w),
            &[c, h, w] => (c, h, w),
            _ => {
                return Err(Error::InvalidShape {
                    shape: self.shape.clone(),
                    reason: "bilinear resize needs H x W or C x H x W".into(),
                })
            }
        };
        if h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "empty image".into(),
            });
        }
        let ys = sample_positions(h, out_h);
        let xs = sample_positions(w, out_w);
        let mut data = Vec::with_capacity(channels * out_h * out_w);
        for plane in self.data.chunks_exact(h * w) {
            for &(y0, y1, fy) in &ys {
                let fy = T::of(fy);
                for &(x0, x1, fx) in &xs {
                    let fx = T::of(fx);
                    let (a, b) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                    let (c, d) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                    let top = a + (b - a) * fx;
                    let bottom = c + (d - c) * fx;
                    let v = top + (bottom - top) * fy;
                    let lo = a.min(b).min(c.min(d));
                    let hi = a.max(b).max(c.max(d));
                    data.push(v.max(lo).min(hi));
                }
            }
        }
        let shape = if self.rank() == 2 {
            vec![out_h, out_w]
        } else {
            vec![channels, out_h, out_w]
        };
        Tensor { shape, data }.checked("bilinear_resize")
    }

    /// Linear rescale to `[0, 1]`; a constant tensor maps to all zeros.
    pub fn minmax_normalize(&self) -> Self {
        let (Some(lo), Some(hi)) = (self.min(), self.max()) else {
            return self.clone();
        };
        let range = hi - lo;
        let data = if range > T::zero() {
            self.data
                .iter()
                .map(|&v| ((v - lo) / range).min(T::one()))
                .collect()
        } else {
            vec![T::zero(); self.len()]
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

/// For each output index: (lower source index, upper source index, fraction).
fn sample_positions(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let src = (i * (n_in - 1)) as f64 / (n_out - 1) as f64;
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}
