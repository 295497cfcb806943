//! Row-major dense tensors with copy-on-write storage.

use std::fmt;
use std::sync::Arc;

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Element type for all numeric code: `f32` for training, `f64` for the
/// verification suites. Random draws go through `f64` so that both
/// instantiations consume RNG streams identically.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Send + Sync + Default + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. Cloning is O(1); mutation copies on write.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != count {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {count} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let count: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); count]),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let count: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; count]),
        }
    }

    pub fn scalar_value(value: T) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    /// Standard-normal tensor; draws are made in f64 and cast.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let count: usize = shape.iter().product();
        let data = (0..count)
            .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// Same data, new shape; element counts must agree.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != self.data.len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// out = a*self + b*other, elementwise.
    pub fn scaled_sum(&self, a: T, other: &Self, b: T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "scaled_sum {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast elementwise to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect()),
        }
    }

    /// Bitwise equality of shape and payload (exact, not approximate).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
