use std::collections::BTreeMap;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a named tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
///
/// Registration order is the serialization order, so building the same
/// architecture twice yields identical ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Adds a tensor. Panics on a duplicate name: layouts are built by code,
    /// so a clash is a programming error.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<S>) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape(format!(
                "parameter `{}` expects {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, id: ParamId) -> &mut [S] {
        self.tensors[id.0].data_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Drops every parameter registered after the first `n`.
    pub fn truncate(&mut self, n: usize) {
        self.names.truncate(n);
        self.tensors.truncate(n);
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Parameter gradients produced by a backward pass. Parameters that took no
/// part in the computation are absent, which reads as an exact zero.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S: Scalar = f32> {
    map: BTreeMap<ParamId, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub(crate) fn insert(&mut self, id: ParamId, grad: Vec<S>) {
        self.map.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&[S]> {
        self.map.get(&id).map(Vec::as_slice)
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<S>> {
        self.map.get_mut(&id)
    }

    /// True when the gradient for `id` is absent or identically zero.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.get(id)
            .map_or(true, |g| g.iter().all(|v| *v == S::zero()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[S])> {
        self.map.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients<S>) {
        for (id, g) in &other.map {
            match self.map.get_mut(id) {
                Some(acc) => {
                    for (a, &b) in acc.iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
                None => {
                    self.map.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for g in self.map.values_mut() {
            for v in g.iter_mut() {
                *v = *v * factor;
            }
        }
    }

    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.map
            .iter()
            .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
            .map(|(id, _)| *id)
    }
}
