//! Named parameter collections.

use indexmap::IndexMap;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors with per-parameter trainable flags. Names are
/// unique and shapes are fixed once a parameter is added.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        self.add_with_flag(name, tensor, true)
    }

    pub fn add_with_flag(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    /// Replace a parameter's values; the shape is immutable.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                entry.tensor.shape(),
                tensor.shape()
            )));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total element count across all parameters.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: v.tensor.cast::<U>(),
                            trainable: v.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Bitwise equality of names, flags, and payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(
                |((an, ae), (bn, be))| {
                    an == bn && ae.trainable == be.trainable && ae.tensor.bit_eq(&be.tensor)
                },
            )
    }
}

/// Gradients shaped like (the trainable subset of) a `ParamSet`.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads<T> {
    pub by_name: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    /// Accumulate `other * scale` into `self` (names must match on overlap).
    pub fn accumulate_scaled(&mut self, other: &ParamGrads<T>, scale: T) -> Result<()> {
        for (name, grad) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => {
                    let sum = acc.scaled_sum(T::one(), grad, scale)?;
                    *acc = sum;
                }
                None => {
                    self.by_name
                        .insert(name.clone(), grad.map(|v| v * scale));
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.by_name.values().all(|t| t.all_finite())
    }
}
