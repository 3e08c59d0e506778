use std::collections::BTreeMap;

use crate::error::{HydaError, Result};
use crate::numerics::{ModelParams, Tensor, WeightDecayGroup};

/// First and second moments of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

/// AdamW with decoupled decay applied to the hypergraph group only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay_hg: f64,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay_hg: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay_hg,
            state: BTreeMap::new(),
        }
    }

    fn decay(&self, group: WeightDecayGroup) -> f64 {
        match group {
            WeightDecayGroup::Hypergraph => self.weight_decay_hg,
            WeightDecayGroup::Other => 0.0,
        }
    }

    /// One update at rate `lr`. Tensors with no gradient are skipped.
    pub fn step(&mut self, params: &mut ModelParams, lr: f64) -> Result<()> {
        for p in params.iter_mut() {
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            if grad.shape() != p.value.shape() {
                return Err(crate::error::shape_mismatch(
                    &p.name,
                    grad.shape(),
                    p.value.shape(),
                ));
            }
            let decay = self.decay(p.group);
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                step: 0,
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            if st.m.shape() != p.value.shape() {
                return Err(HydaError::shape(format!(
                    "optimizer state for {} has shape {:?}",
                    p.name,
                    st.m.shape()
                )));
            }
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
