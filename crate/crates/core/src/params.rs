//! Named parameter storage and seeded initialization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            tensors: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Registers a weight drawn uniformly from `±sqrt(1 / fan_in)`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::rand_uniform(shape, -bound, bound, &mut self.rng);
        self.insert(name, t);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        let prev = self.tensors.insert(name.to_string(), t);
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Replaces an existing tensor, keeping the shape contract.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::shape("param set", slot.shape(), t.shape()));
        }
        *slot = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}
