use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::array::DiffArray;
use super::graph::Graph;
use crate::error::{Error, Result};

/// Stable index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<DiffArray>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DiffArray) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value.with_requires_grad(true));
        Ok(id)
    }

    /// Uniform Glorot initialisation for a `[fan_in, fan_out]` weight.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| round_f32(rng.gen_range(-bound..bound)))
            .collect();
        self.insert(name, DiffArray::new(&[fan_in, fan_out], data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, DiffArray::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, DiffArray::full(shape, 1.0))
    }

    /// Uniform values in `[-scale, scale)`, used for embedding tables.
    pub fn uniform(&mut self, name: &str, shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| round_f32(rng.gen_range(-scale..scale))).collect();
        self.insert(name, DiffArray::new(shape, data)?)
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

    pub fn get(&self, id: ParamId) -> &DiffArray {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffArray {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(DiffArray::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(DiffArray::zero_grad);
    }

    /// Adds the parameter gradients recorded on `graph` into this store.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (id, g) in graph.param_grads() {
            self.tensors[id.0].accumulate_grad(&g);
        }
    }

    /// Overwrites the value of `name`, which must keep its shape.
    pub fn set(&mut self, name: &str, value: DiffArray) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} vs stored {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value.with_requires_grad(true);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffArray)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Rounds to the nearest `f32`, the storage precision of checkpoints.
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}
