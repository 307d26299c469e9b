use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// One named entry of a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    /// Accumulated gradient, shaped like `value` when present.
    pub grad: Option<Tensor>,
    /// Buffers (batch-norm running statistics) are stored alongside the
    /// weights but never receive gradients.
    pub trainable: bool,
}

/// Named parameters and buffers, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.insert_entry(name.into(), value, true)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.insert_entry(name.into(), value, false)
    }

    fn insert_entry(&mut self, name: String, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name:?}")));
        }
        self.entries.insert(
            name,
            ParamEntry {
                value,
                grad: None,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    /// Adds `grads` into the gradient slots. Unknown names and shape
    /// mismatches are errors.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown {name:?}")))?;
            if e.value.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {name}: {:?} vs {:?}",
                    g.shape(),
                    e.value.shape()
                )));
            }
            match &mut e.grad {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }

    /// Overwrites buffers from `(name, value)` pairs emitted by a forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor)>) -> Result<()> {
        for (name, value) in updates {
            self.set(&name, value)?;
        }
        Ok(())
    }

    /// Keeps only entries whose name starts with one of `prefixes`.
    pub fn filtered(&self, prefixes: &[&str]) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Replaces every entry of `self` that also exists in `other`.
    pub fn overwrite_from(&mut self, other: &ParameterSet) -> Result<()> {
        for (name, e) in &other.entries {
            self.set(name, e.value.clone())?;
        }
        Ok(())
    }
}
