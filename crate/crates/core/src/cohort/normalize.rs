use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CohortDataset;
use crate::error::{HydaError, Result};

/// Per-feature min-max bounds for every embedding block and the tabular block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    /// Keyed by modality name.
    pub bounds: BTreeMap<String, FeatureBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureBounds {
    fn scale(&self, v: f64, j: usize) -> f64 {
        let (lo, hi) = (self.min[j], self.max[j]);
        if hi <= lo {
            0.0
        } else {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        }
    }
}

fn bounds_of<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> FeatureBounds {
    let mut min = vec![f64::INFINITY; width];
    let mut max = vec![f64::NEG_INFINITY; width];
    for row in rows {
        for (j, &v) in row.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    FeatureBounds { min, max }
}

impl MinMaxScaler {
    /// Fits bounds on the subjects at `indices`.
    pub fn fit(dataset: &CohortDataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(HydaError::config("cannot fit a scaler on zero subjects"));
        }
        let mut bounds = BTreeMap::new();
        for m in &dataset.modalities {
            let rows: Vec<&[f64]> = indices
                .iter()
                .map(|&i| {
                    let s = &dataset.subjects[i];
                    if m.is_imaging() {
                        s.embeddings[&m.name].as_slice()
                    } else {
                        s.tabular.as_deref().unwrap_or(&[])
                    }
                })
                .collect();
            bounds.insert(m.name.clone(), bounds_of(rows.into_iter(), m.emb_dim));
        }
        Ok(Self { bounds })
    }

    /// Maps every embedding and tabular value into `[0, 1]`; values beyond the
    /// fitted range are clipped and constant features map to 0.
    pub fn apply(&self, dataset: &CohortDataset) -> Result<CohortDataset> {
        let mut out = dataset.clone();
        for m in &dataset.modalities {
            let b = self
                .bounds
                .get(&m.name)
                .ok_or_else(|| HydaError::config(format!("scaler has no bounds for modality {}", m.name)))?;
            if b.min.len() != m.emb_dim {
                return Err(HydaError::shape(format!(
                    "scaler width {} for modality {} of width {}",
                    b.min.len(),
                    m.name,
                    m.emb_dim
                )));
            }
            for s in &mut out.subjects {
                let row = if m.is_imaging() {
                    s.embeddings.get_mut(&m.name)
                } else {
                    s.tabular.as_mut()
                };
                if let Some(row) = row {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = b.scale(*v, j);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Fits on every subject and applies.
pub fn normalize(dataset: &CohortDataset) -> Result<CohortDataset> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    MinMaxScaler::fit(dataset, &all)?.apply(dataset)
}
