//! Named parameter and buffer storage.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Learnable, receives gradients.
    Param,
    /// State updated outside the optimizer (e.g. running statistics).
    Buffer,
}

/// Insertion-ordered map from names to tensors. The order is part of the
/// checkpoint format, so it must be deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, (Slot, Tensor<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, slot: Slot, value: Tensor<T>) {
        self.entries.insert(name.into(), (slot, value));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.entries.get(name).map(|(s, _)| *s)
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, Slot, &Tensor<T>)> {
        self.entries.iter().map(|(k, (s, t))| (k.as_str(), *s, t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, Slot, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, (s, t))| (k.as_str(), *s, t))
    }

    /// Total number of learnable scalars.
    pub fn num_params(&self) -> usize {
        self.iter()
            .filter(|(_, s, _)| *s == Slot::Param)
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, (s, t))| (k.clone(), (*s, t.cast())))
                .collect(),
        }
    }

    /// Copies every entry of `other` whose name starts with `prefix`.
    pub fn extend_prefixed(&mut self, other: &ParamStore<T>, prefix: &str) {
        for (k, s, t) in other.iter() {
            if k.starts_with(prefix) {
                self.insert(k, s, t.clone());
            }
        }
    }
}
