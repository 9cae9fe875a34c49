//! Dense arrays with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every training step. Leaves are bound from
//! plain [`Tensor`] values, every op appends a node, and [`Tape::backward`]
//! walks the nodes in reverse to produce a [`Gradients`] table keyed by leaf.
//!
//! All arithmetic is generic over [`Scalar`], so the same model code runs in
//! `f32` for training and in `f64` for finite-difference checks.

mod kernels;
mod optim;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use optim::{AdamW, AdamWConfig};
pub use tape::{Gradients, Tape, Var};

/// On-disk element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type usable by the engine.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes one element from exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A dense row-major array. `shape == []` denotes a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax of `logits / temperature` along `axis`.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, axis: usize, temperature: T) -> Result<Tensor<T>> {
    if temperature <= T::zero() || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if axis >= logits.rank() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for {:?}", logits.shape()),
        ));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let mut out = logits.clone();
    let (outer, len, inner) = axis_extents(logits.shape(), axis);
    kernels::softmax_axis(&mut out.data, outer, len, inner, temperature);
    Ok(out)
}

/// Teacher target distribution `softmax((logits - center) / temperature)` per row.
pub fn teacher_distribution<T: Scalar>(
    logits: &Tensor<T>,
    center: Option<&Tensor<T>>,
    temperature: T,
) -> Result<Tensor<T>> {
    let shifted = match center {
        Some(c) => {
            if c.len() != logits.cols() {
                return Err(Error::shape(
                    "teacher_distribution",
                    format!("center {:?} vs logits {:?}", c.shape(), logits.shape()),
                ));
            }
            let cols = logits.cols();
            Tensor::from_fn(logits.shape(), |i| logits.data[i] - c.data[i % cols])
        }
        None => logits.clone(),
    };
    let axis = shifted.rank().saturating_sub(1);
    softmax(&shifted, axis, temperature)
}

/// Shannon entropy (nats) of every row of a row-stochastic tensor.
pub fn row_entropy<T: Scalar>(probs: &Tensor<T>) -> Vec<T> {
    let cols = probs.cols();
    probs
        .data
        .chunks(cols)
        .map(|row| {
            -row.iter()
                .filter(|p| **p > T::zero())
                .map(|&p| p * p.ln())
                .sum::<T>()
        })
        .collect()
}
