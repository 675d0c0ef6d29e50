//! Named trainable parameters.
//!
//! Parameters are registered once at model construction in a fixed order;
//! that order is the canonical layout for checkpoints, optimizer state and
//! gradient reports. Group names (the prefix before the first dot) drive the
//! per-group breakdown of the gradient checker.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Group a parameter belongs to: the name prefix before the first dot.
    pub fn group(&self, id: ParamId) -> &str {
        let name = self.name(id);
        name.split('.').next().unwrap_or(name)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<S>) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(Error::Config(format!(
                "parameter {}: shape {:?} incompatible with {:?}",
                self.name(id),
                tensor.shape(),
                self.tensors[id.0].shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Cast every parameter through f64, preserving names and order.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (_, name, t) in self.iter() {
            out.register(name.to_string(), t.cast::<T>());
        }
        out
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}
