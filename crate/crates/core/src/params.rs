//! Named parameter table and weight initialization.

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered table of named tensors. Each name appears exactly once.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Param(format!("'{name}' registered twice")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    /// Replaces an existing entry, keeping its position and shape.
    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Param(format!("unknown parameter '{name}'")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Param(format!(
                "'{name}' has shape {:?}, replacement has {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Param(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
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

    /// Total number of scalar values across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&self) {
        self.entries.values().for_each(Tensor::zero_grad);
    }
}

/// He-normal weights with fan-in `fan_in`, as a gradient-tracking leaf.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("valid shape").requires_grad()
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).requires_grad()
}

pub fn ones_param(shape: &[usize]) -> Tensor {
    Tensor::ones(shape).requires_grad()
}
