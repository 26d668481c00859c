use indexmap::IndexMap;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::container::Entry;
use crate::error::{Error, Result};

/// Named parameter tensors in insertion order. Checkpoints serialize each
/// under `<prefix><name>`, widened to f64 (exact for f32, so reload is
/// bit-identical).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    map: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn new() -> Self {
        ModelParams {
            map: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter '{name}'");
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn to_entries(&self, prefix: &str) -> Vec<Entry> {
        self.map
            .iter()
            .map(|(name, t)| {
                Entry::f64(
                    format!("{prefix}{name}"),
                    t.shape().iter().map(|&d| d as u64).collect(),
                    t.to_f64().data().to_vec(),
                )
            })
            .collect()
    }

    /// Rebuild from every entry whose name starts with `prefix`, in file order.
    pub fn from_entries(prefix: &str, entries: &[Entry]) -> Result<Self> {
        let mut out = ModelParams::new();
        for e in entries {
            let Some(name) = e.name.strip_prefix(prefix) else {
                continue;
            };
            if e.extents.len() != 4 {
                return Err(Error::Format(format!(
                    "parameter '{}' has rank {}, expected 4",
                    e.name,
                    e.extents.len()
                )));
            }
            let shape = [
                e.extents[0] as usize,
                e.extents[1] as usize,
                e.extents[2] as usize,
                e.extents[3] as usize,
            ];
            let data = e.payload.to_f64().iter().map(|&v| S::from_f64(v)).collect();
            out.insert(name, Tensor::from_vec(shape, data));
        }
        if out.is_empty() {
            return Err(Error::Format(format!(
                "no parameters found under prefix '{prefix}'"
            )));
        }
        Ok(out)
    }
}

impl<S: Scalar> Default for ModelParams<S> {
    fn default() -> Self {
        Self::new()
    }
}
