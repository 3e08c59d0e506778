use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Gradients, Graph, Tensor, Var};
use crate::error::{HydaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayGroup {
    Hypergraph,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub group: WeightDecayGroup,
}

/// Named trainable tensors, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    params: Vec<ParamTensor>,
    index: BTreeMap<String, usize>,
}

/// Graph handles for every parameter of a [`ModelParams`] bound to one pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| HydaError::config(format!("unknown parameter {name}")))
    }
}

/// Stable 64-bit FNV-1a; used to derive per-parameter init streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, group: WeightDecayGroup) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(HydaError::config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(ParamTensor {
            name: name.to_string(),
            value,
            grad: None,
            group,
        });
        Ok(())
    }

    /// Gaussian init with std `scale`, drawn from a stream keyed by
    /// `(seed, name)` so a parameter's initial value does not depend on
    /// which other parameters exist.
    pub fn insert_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        scale: f64,
        seed: u64,
        group: WeightDecayGroup,
    ) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let normal = Normal::new(0.0, scale).map_err(|e| HydaError::config(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| normal.sample(&mut rng));
        self.insert(name, t, group)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize], group: WeightDecayGroup) -> Result<()> {
        self.insert(name, Tensor::zeros(shape), group)
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| (p.name.clone(), graph.param(p.value.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Copy gradients out of a backward pass. Parameters the loss never
    /// reached keep `grad = None`.
    pub fn collect_grads(&mut self, bound: &BoundParams, grads: &Gradients) {
        for p in &mut self.params {
            p.grad = bound.vars.get(&p.name).and_then(|&v| grads.get(v));
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}
