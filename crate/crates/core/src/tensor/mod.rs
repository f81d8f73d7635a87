//! Dense row-major tensors, seeded initialization and the DTB file format.

mod dtb;
mod rng;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use dtb::{read_dtb, read_dtb_file, write_dtb, write_dtb_file, DType};
pub use rng::Rng;

/// Floating point element type of a [`Tensor`].
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
    /// Raw IEEE-754 bits, widened to 64 bits.
    fn bits(self) -> u64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense N-dimensional array. `shape.iter().product() == data.len()` always.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape(
            "rank 0 tensors are not supported".into(),
        ));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::InvalidShape(format!(
            "dimension {pos} of {shape:?} is zero"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape(format!("{shape:?} overflows")))
}

impl<T: Real> Tensor<T> {
    /// Tensor of `shape` with every element set to `fill`.
    pub fn alloc(shape: &[usize], fill: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    /// Zero tensor. Panics on an invalid shape; use [`Tensor::alloc`] for
    /// untrusted shapes.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::alloc(shape, T::zero()).expect("valid tensor shape")
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Zero-mean normal samples with standard deviation `sqrt(2 / fan_in)`.
    pub fn he_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Self> {
        if fan_in == 0 {
            return Err(Error::InvalidArgument("fan_in must be at least 1".into()));
        }
        let len = check_shape(shape)?;
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..len).map(|_| T::from_f64(rng.normal() * std)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interpret as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a rank-4 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    /// Interpret as `[rows, cols]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a rank-2 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(T::one(), other)?;
        Ok(out)
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Copy out slot `d` of the trailing axis, dropping that axis.
    pub fn slice_last(&self, d: usize) -> Result<Self> {
        let (outer, t) = self.split_last()?;
        if d >= t {
            return Err(Error::InvalidArgument(format!(
                "slot {d} out of range for trailing axis of size {t}"
            )));
        }
        let data = (0..outer).map(|i| self.data[i * t + d]).collect();
        let shape = if self.rank() == 1 {
            vec![1]
        } else {
            self.shape[..self.rank() - 1].to_vec()
        };
        Self::from_vec(&shape, data)
    }

    /// Overwrite slot `d` of the trailing axis.
    pub fn assign_last(&mut self, d: usize, src: &Self) -> Result<()> {
        let (outer, t) = self.split_last()?;
        if d >= t || src.len() != outer {
            return Err(Error::ShapeMismatch(format!(
                "cannot write {:?} into slot {d} of {:?}",
                src.shape, self.shape
            )));
        }
        for (i, &v) in src.data.iter().enumerate() {
            self.data[i * t + d] = v;
        }
        Ok(())
    }

    /// Stack equally shaped tensors along a new trailing axis.
    pub fn stack_last(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
        for p in parts {
            first.same_shape(p, "stack")?;
        }
        let t = parts.len();
        let mut data = vec![T::zero(); first.len() * t];
        for (d, p) in parts.iter().enumerate() {
            for (i, &v) in p.data.iter().enumerate() {
                data[i * t + d] = v;
            }
        }
        let mut shape = first.shape.clone();
        shape.push(t);
        Self::from_vec(&shape, data)
    }

    /// Append one slot to the trailing axis.
    pub fn push_last(&self, src: &Self) -> Result<Self> {
        let (outer, t) = self.split_last()?;
        if src.len() != outer {
            return Err(Error::ShapeMismatch(format!(
                "cannot append {:?} to {:?}",
                src.shape, self.shape
            )));
        }
        let mut data = Vec::with_capacity(outer * (t + 1));
        for i in 0..outer {
            data.extend_from_slice(&self.data[i * t..(i + 1) * t]);
            data.push(src.data[i]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = t + 1;
        Self::from_vec(&shape, data)
    }

    fn split_last(&self) -> Result<(usize, usize)> {
        let t = *self.shape.last().unwrap();
        Ok((self.data.len() / t, t))
    }

    /// Order-sensitive 64-bit digest of dtype, shape and exact element bits.
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        h.update([T::DTYPE.code()]);
        for &d in &self.shape {
            h.update((d as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for &v in &self.data {
            buf.extend_from_slice(&v.bits().to_le_bytes());
        }
        h.update(&buf);
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}
