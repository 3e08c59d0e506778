//! Cohort container: `manifest.json` plus one headerless little-endian f32
//! file per subject tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CohortDataset, ModalityDescriptor, ModalityKind, SubjectRecord};
use crate::error::{HydaError, Result};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: &str = "HYC1";
const DTYPE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: String,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    modalities: Vec<ManifestModality>,
    subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestModality {
    name: String,
    kind: ModalityKind,
    emb_dim: usize,
    map_shape: Option<[usize; 4]>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSubject {
    id: String,
    label: usize,
    files: BTreeMap<String, ModalityFiles>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModalityFiles {
    embedding: FileEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_map: Option<FileEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEntry {
    path: String,
    shape: Vec<usize>,
    sha256: String,
}

fn encode(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn write_tensor(root: &Path, rel: String, shape: Vec<usize>, values: &[f64]) -> Result<FileEntry> {
    let bytes = encode(values);
    let path = root.join(&rel);
    fs::write(&path, &bytes).map_err(|e| HydaError::io(&path, e))?;
    Ok(FileEntry {
        path: rel,
        shape,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn read_tensor(root: &Path, entry: &FileEntry, expected: &[usize], what: &str) -> Result<Vec<f64>> {
    if entry.shape != expected {
        return Err(HydaError::format(format!(
            "{what} ({}): manifest shape {:?}, descriptor requires {expected:?}",
            entry.path, entry.shape
        )));
    }
    let path = root.join(&entry.path);
    let bytes = fs::read(&path)
        .map_err(|e| HydaError::format(format!("{what} ({}): cannot read: {e}", entry.path)))?;
    let want = 4 * Tensor::numel(expected);
    if bytes.len() != want {
        return Err(HydaError::format(format!(
            "{what} ({}): {} bytes on disk, expected {want}",
            entry.path,
            bytes.len()
        )));
    }
    if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
        return Err(HydaError::format(format!(
            "{what} ({}): checksum mismatch",
            entry.path
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn save_cohort(dataset: &CohortDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    let tdir = dir.join("tensors");
    fs::create_dir_all(&tdir).map_err(|e| HydaError::io(&tdir, e))?;
    let mut subjects = Vec::with_capacity(dataset.len());
    for s in &dataset.subjects {
        let mut files = BTreeMap::new();
        for m in &dataset.modalities {
            let entry = match m.kind {
                ModalityKind::Imaging => {
                    let fm = &s.feature_maps[&m.name];
                    ModalityFiles {
                        embedding: write_tensor(
                            dir,
                            format!("tensors/{}.{}.emb.f32", s.subject_id, m.name),
                            vec![m.emb_dim],
                            &s.embeddings[&m.name],
                        )?,
                        feature_map: Some(write_tensor(
                            dir,
                            format!("tensors/{}.{}.map.f32", s.subject_id, m.name),
                            fm.shape().to_vec(),
                            fm.data(),
                        )?),
                    }
                }
                ModalityKind::Tabular => ModalityFiles {
                    embedding: write_tensor(
                        dir,
                        format!("tensors/{}.{}.f32", s.subject_id, m.name),
                        vec![m.emb_dim],
                        s.tabular.as_deref().unwrap_or(&[]),
                    )?,
                    feature_map: None,
                },
            };
            files.insert(m.name.clone(), entry);
        }
        subjects.push(ManifestSubject {
            id: s.subject_id.clone(),
            label: s.label,
            files,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION.into(),
        n: dataset.len(),
        k: dataset.num_classes,
        modalities: dataset
            .modalities
            .iter()
            .map(|m| ManifestModality {
                name: m.name.clone(),
                kind: m.kind,
                emb_dim: m.emb_dim,
                map_shape: m.map_shape,
                dtype: DTYPE.into(),
            })
            .collect(),
        subjects,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join("manifest.json");
    fs::write(&path, text + "\n").map_err(|e| HydaError::io(&path, e))
}

pub fn load_cohort(dir: &Path) -> Result<CohortDataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| HydaError::format(format!("{}: cannot read: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| HydaError::format(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(HydaError::format(format!(
            "manifest.json: format_version {:?}, expected {FORMAT_VERSION:?}",
            manifest.format_version
        )));
    }
    if manifest.subjects.len() != manifest.n {
        return Err(HydaError::format(format!(
            "manifest.json: N = {} but {} subjects listed",
            manifest.n,
            manifest.subjects.len()
        )));
    }
    let mut modalities = Vec::with_capacity(manifest.modalities.len());
    for m in &manifest.modalities {
        if m.dtype != DTYPE {
            return Err(HydaError::format(format!(
                "modality {}: dtype {:?}",
                m.name, m.dtype
            )));
        }
        modalities.push(ModalityDescriptor {
            name: m.name.clone(),
            kind: m.kind,
            emb_dim: m.emb_dim,
            map_shape: m.map_shape,
        });
    }
    let mut subjects = Vec::with_capacity(manifest.n);
    for s in &manifest.subjects {
        let mut rec = SubjectRecord {
            subject_id: s.id.clone(),
            embeddings: BTreeMap::new(),
            feature_maps: BTreeMap::new(),
            tabular: None,
            label: s.label,
        };
        for m in &modalities {
            let entry = s.files.get(&m.name).ok_or_else(|| {
                HydaError::format(format!("subject {}: no file entry for modality {}", s.id, m.name))
            })?;
            let what = format!("subject {} modality {}", s.id, m.name);
            let emb = read_tensor(dir, &entry.embedding, &[m.emb_dim], &what)?;
            match (m.kind, m.map_shape) {
                (ModalityKind::Imaging, Some([c, d, h, w])) => {
                    let fe = entry
                        .feature_map
                        .as_ref()
                        .ok_or_else(|| HydaError::format(format!("{what}: no feature_map file entry")))?;
                    let shape = [1, c, d, h, w];
                    let data = read_tensor(dir, fe, &shape, &format!("{what} feature map"))?;
                    rec.feature_maps
                        .insert(m.name.clone(), Tensor::new(&shape, data)?);
                    rec.embeddings.insert(m.name.clone(), emb);
                }
                _ => rec.tabular = Some(emb),
            }
        }
        if let Some(extra) = s.files.keys().find(|k| !modalities.iter().any(|m| &&m.name == k)) {
            return Err(HydaError::format(format!(
                "subject {}: file entry for undeclared modality {extra}",
                s.id
            )));
        }
        subjects.push(rec);
    }
    let ds = CohortDataset {
        modalities,
        num_classes: manifest.k,
        subjects,
    };
    ds.validate().map_err(|e| match e {
        HydaError::Format(_) => e,
        other => HydaError::format(other.to_string()),
    })?;
    Ok(ds)
}
