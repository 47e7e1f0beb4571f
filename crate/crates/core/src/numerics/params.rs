use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter arrays plus non-trainable buffers, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), Entry { tensor, trainable: true });
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), Entry { tensor, trainable: false });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(_, e)| e.trainable).map(|(k, e)| (k, &e.tensor))
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

    pub fn param_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Overwrites buffers with values recorded during a training-mode forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor)>) -> Result<()> {
        for (name, value) in updates {
            let slot = self.get_mut(&name)?;
            if slot.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "buffer {name}: update shape {:?} vs stored {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }

    /// Replaces every tensor from `records`, which must name exactly the
    /// entries already present with identical shapes.
    pub fn load_records(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        if records.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} records, found {}",
                self.entries.len(),
                records.len()
            )));
        }
        for (name, tensor) in records {
            let entry = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected record `{name}`")))?;
            if entry.tensor.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "record `{name}` has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    entry.tensor.shape()
                )));
            }
            entry.tensor = tensor;
        }
        Ok(())
    }
}
