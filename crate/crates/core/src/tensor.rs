//! Dense row-major tensors and the statistics the codec, analyzer and trainer share.

use std::fmt::Debug;
use std::io::{Read, Write};

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]: `f32` for activation payloads, `f64` for
/// oracle and gradient-check builds.
pub trait Scalar: Float + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    fn cast_from(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn cast_from(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn cast_from(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense N-dimensional array with an explicit shape and flat row-major storage.
///
/// Every element is finite; constructors reject NaN and infinities.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let count = shape_len(&shape)?;
        if data.len() != count {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                count
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite element at index {i}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let count = shape_len(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![T::zero(); count],
        })
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let count = shape_len(&shape)?;
        Self::new(shape, (0..count).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let count = shape_len(&shape)?;
        if count != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Self::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast_from(v.as_f64())).collect(),
        }
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Mean of absolute values, accumulated in double precision.
    pub fn mean_abs(&self) -> Result<f64> {
        self.require_nonempty()?;
        let sum: f64 = self.data.iter().map(|v| v.as_f64().abs()).sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Fraction of elements that are not exactly zero.
    pub fn nonzero_ratio(&self) -> Result<f64> {
        self.require_nonempty()?;
        let nonzero = self.data.iter().filter(|v| !v.is_zero()).count();
        Ok(nonzero as f64 / self.data.len() as f64)
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.data.is_empty() {
            return Err(Error::Domain("empty tensor".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> std::ops::Index<usize> for Tensor<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

fn shape_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor rank must be at least 1".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))
}

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";

/// Writes the raw tensor file format: magic `TNSR`, `u8` rank, `u64` extents,
/// then the little-endian `f32` payload.
pub fn write_tnsr<T: Scalar, W: Write>(t: &Tensor<T>, mut w: W) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Shape(format!("rank {} exceeds 255", t.rank())))?;
    let mut buf = Vec::with_capacity(5 + 8 * t.rank() + 4 * t.len());
    buf.extend_from_slice(TNSR_MAGIC);
    buf.push(rank);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tnsr<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_tnsr(&bytes)
}

pub fn decode_tnsr(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 5 {
        return Err(Error::format(bytes.len(), "truncated TNSR header"));
    }
    if &bytes[..4] != TNSR_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"TNSR\""));
    }
    let rank = bytes[4] as usize;
    let mut off = 5;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = bytes
            .get(off..off + 8)
            .ok_or_else(|| Error::format(off, "truncated extent"))?;
        let d = u64::from_le_bytes(raw.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::format(off, "extent too large"))?);
        off += 8;
    }
    let count = shape_len(&shape).map_err(|e| Error::format(5, e.to_string()))?;
    let payload = &bytes[off..];
    if payload.len() != count * 4 {
        return Err(Error::format(
            off,
            format!("payload is {} bytes, expected {}", payload.len(), count * 4),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}
