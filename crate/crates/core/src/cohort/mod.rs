//! Subject records, the on-disk cohort container, synthetic generation,
//! normalization and stratified fold splitting.

mod folds;
mod io;
mod normalize;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HydaError, Result};
use crate::numerics::Tensor;

pub use folds::{kfold_split, FoldSplit};
pub use io::{load_cohort, save_cohort, FORMAT_VERSION};
pub use normalize::{normalize, MinMaxScaler};
pub use synth::{synth_cohort, SynthSpec, TABULAR_WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Imaging,
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDescriptor {
    pub name: String,
    pub kind: ModalityKind,
    /// Embedding width; for the tabular modality this is the raw feature count.
    pub emb_dim: usize,
    /// `[C_hid, D, H, W]` for imaging modalities.
    pub map_shape: Option<[usize; 4]>,
}

impl ModalityDescriptor {
    pub fn is_imaging(&self) -> bool {
        self.kind == ModalityKind::Imaging
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    /// Imaging-modality embeddings keyed by modality name.
    pub embeddings: BTreeMap<String, Vec<f64>>,
    /// Imaging-modality feature maps `[1, C_hid, D, H, W]`.
    pub feature_maps: BTreeMap<String, Tensor>,
    pub tabular: Option<Vec<f64>>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortDataset {
    pub modalities: Vec<ModalityDescriptor>,
    pub num_classes: usize,
    pub subjects: Vec<SubjectRecord>,
}

impl CohortDataset {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn modality(&self, name: &str) -> Option<&ModalityDescriptor> {
        self.modalities.iter().find(|m| m.name == name)
    }

    pub fn tabular_modality(&self) -> Option<&ModalityDescriptor> {
        self.modalities.iter().find(|m| m.kind == ModalityKind::Tabular)
    }

    pub fn imaging_modalities(&self) -> impl Iterator<Item = &ModalityDescriptor> {
        self.modalities.iter().filter(|m| m.is_imaging())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.subjects {
            counts[s.label] += 1;
        }
        counts
    }

    /// Minority class (ties go to the higher index); the positive class for
    /// binary metrics.
    pub fn positive_class(&self) -> usize {
        let counts = self.class_counts();
        (0..counts.len()).rev().min_by_key(|&c| counts[c]).unwrap_or(0)
    }

    pub fn index_of(&self, subject_id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.subject_id == subject_id)
    }

    /// Checks the structural invariants shared by every subject.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(HydaError::config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.modalities {
            if !names.insert(m.name.as_str()) {
                return Err(HydaError::format(format!("duplicate modality {}", m.name)));
            }
            match (m.kind, m.map_shape) {
                (ModalityKind::Imaging, Some([c, d, h, w])) => {
                    if c == 0 || d * h * w == 0 || m.emb_dim % (d * h * w) != 0 {
                        return Err(HydaError::shape(format!(
                            "modality {}: embedding width {} not divisible by D*H*W of {:?}",
                            m.name, m.emb_dim, m.map_shape
                        )));
                    }
                }
                (ModalityKind::Imaging, None) => {
                    return Err(HydaError::format(format!(
                        "imaging modality {} has no map shape",
                        m.name
                    )));
                }
                (ModalityKind::Tabular, Some(_)) => {
                    return Err(HydaError::format(format!(
                        "tabular modality {} has a map shape",
                        m.name
                    )));
                }
                (ModalityKind::Tabular, None) => {}
            }
        }
        if self
            .modalities
            .iter()
            .filter(|m| m.kind == ModalityKind::Tabular)
            .count()
            > 1
        {
            return Err(HydaError::format("more than one tabular modality"));
        }
        for s in &self.subjects {
            if s.label >= self.num_classes {
                return Err(HydaError::Label(format!(
                    "subject {} label {} >= {}",
                    s.subject_id, s.label, self.num_classes
                )));
            }
            for m in &self.modalities {
                match m.kind {
                    ModalityKind::Imaging => {
                        let e = s.embeddings.get(&m.name).ok_or_else(|| {
                            HydaError::format(format!("subject {} lacks {} embedding", s.subject_id, m.name))
                        })?;
                        let f = s.feature_maps.get(&m.name).ok_or_else(|| {
                            HydaError::format(format!(
                                "subject {} lacks {} feature map",
                                s.subject_id, m.name
                            ))
                        })?;
                        let [c, d, h, w] = m.map_shape.expect("checked above");
                        if e.len() != m.emb_dim || f.shape() != [1, c, d, h, w] {
                            return Err(HydaError::shape(format!(
                                "subject {} modality {}: embedding {} / map {:?}",
                                s.subject_id,
                                m.name,
                                e.len(),
                                f.shape()
                            )));
                        }
                    }
                    ModalityKind::Tabular => {
                        let t = s.tabular.as_ref().ok_or_else(|| {
                            HydaError::format(format!("subject {} lacks tabular features", s.subject_id))
                        })?;
                        if t.len() != m.emb_dim {
                            return Err(HydaError::shape(format!(
                                "subject {} tabular width {} != {}",
                                s.subject_id,
                                t.len(),
                                m.emb_dim
                            )));
                        }
                    }
                }
            }
            if s.embeddings.len() != self.imaging_modalities().count()
                || s.feature_maps.len() != s.embeddings.len()
            {
                return Err(HydaError::format(format!(
                    "subject {} has modalities outside the descriptor list",
                    s.subject_id
                )));
            }
        }
        Ok(())
    }

    /// Copy with every stored value rounded through 32-bit storage.
    pub fn rounded_to_f32(&self) -> Self {
        let r = |v: &f64| *v as f32 as f64;
        let mut out = self.clone();
        for s in &mut out.subjects {
            for e in s.embeddings.values_mut() {
                e.iter_mut().for_each(|v| *v = r(v));
            }
            for f in s.feature_maps.values_mut() {
                f.data_mut().iter_mut().for_each(|v| *v = r(v));
            }
            if let Some(t) = &mut s.tabular {
                t.iter_mut().for_each(|v| *v = r(v));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
