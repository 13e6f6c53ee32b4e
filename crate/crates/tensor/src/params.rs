use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named trainable tensors, ordered by name so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Moves every tensor of `other` into `self`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamSet<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}
