//! Central store for named model parameters and their gradients.
//!
//! Layers hold [`ParamId`] handles instead of owning tensors, which keeps
//! the optimizer, checkpointing and gradient probes independent of model
//! wiring. Registration order is deterministic and becomes the checkpoint
//! order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Non-trainable entries (batch-norm running statistics) are saved in
    /// checkpoints but skipped by the optimizer and gradient probes.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidState(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let id = self.entries.len();
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Number of scalar values across all parameters.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Copies values from `source` entries, matched by name and shape.
    ///
    /// Every entry of the store must be present in `source`; extra source
    /// entries are an error too, so config/architecture drift is caught.
    pub fn load_values(&mut self, source: &[(String, bool, Tensor)]) -> Result<()> {
        if source.len() != self.entries.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters, model expects {}",
                source.len(),
                self.entries.len()
            )));
        }
        let mut by_name: HashMap<&str, &(String, bool, Tensor)> = HashMap::new();
        for item in source {
            by_name.insert(item.0.as_str(), item);
        }
        for entry in &mut self.entries {
            let (_, _, tensor) = by_name.get(entry.name.as_str()).ok_or_else(|| {
                Error::Incompatible(format!("checkpoint is missing parameter `{}`", entry.name))
            })?;
            if tensor.shape() != entry.value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter `{}` has shape {:?} in checkpoint, model expects {:?}",
                    entry.name,
                    tensor.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = (*tensor).clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_lookup() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::zeros(&[2, 2]), true).unwrap();
        assert_eq!(store.name(id), "w");
        assert_eq!(store.lookup("w"), Some(id));
        assert!(store.register("w", Tensor::zeros(&[1]), true).is_err());
    }

    #[test]
    fn load_values_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::zeros(&[2]), true).unwrap();
        let ok = vec![("a".to_string(), true, Tensor::full(&[2], 3.0))];
        store.load_values(&ok).unwrap();
        assert_eq!(store.value(ParamId(0)).data(), &[3.0, 3.0]);

        let wrong_shape = vec![("a".to_string(), true, Tensor::zeros(&[3]))];
        assert!(store.load_values(&wrong_shape).is_err());
        let wrong_name = vec![("b".to_string(), true, Tensor::zeros(&[2]))];
        assert!(store.load_values(&wrong_name).is_err());
        let extra = vec![
            ("a".to_string(), true, Tensor::zeros(&[2])),
            ("b".to_string(), true, Tensor::zeros(&[2])),
        ];
        assert!(store.load_values(&extra).is_err());
    }
}
