//! Binary checkpoint container.
//!
//! Layout: the magic `HYCK1\0`, a little-endian `u64` header length, a JSON
//! header, the tensor payload as little-endian `f64`, and a trailing sha256
//! of everything before it. The header carries the run config, cohort
//! shapes, fingerprint, epoch, fitted scaler and a directory of tensor
//! entries (parameters and optimizer moments) with offsets into the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamW, Moments};
use crate::cohort::{CohortDataset, MinMaxScaler, ModalityDescriptor};
use crate::config::{FusionInit, RunConfig};
use crate::error::{HydaError, Result};
use crate::model::Architecture;
use crate::numerics::{ModelParams, Tensor, WeightDecayGroup};

const MAGIC: &[u8; 6] = b"HYCK1\0";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub classes: usize,
    pub modalities: Vec<ModalityDescriptor>,
    pub fingerprint: String,
    pub epoch: usize,
    pub scaler: MinMaxScaler,
    pub params: ModelParams,
    pub optimizer: AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    group: Option<WeightDecayGroup>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    step: Option<u64>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    classes: usize,
    modalities: Vec<ModalityDescriptor>,
    fingerprint: String,
    epoch: usize,
    scaler: MinMaxScaler,
    betas: [f64; 2],
    eps: f64,
    weight_decay_hg: f64,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    /// Fails with a config error naming both fingerprints when `ds` does not
    /// match the cohort shapes this checkpoint was trained on.
    pub fn check_compatible(&self, ds: &CohortDataset) -> Result<()> {
        let theirs = self.config.fingerprint(ds);
        if theirs != self.fingerprint {
            return Err(HydaError::config(format!(
                "fingerprint mismatch: checkpoint {} vs data {}",
                self.fingerprint, theirs
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload: Vec<f64> = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: &str, kind, t: &Tensor, group, step| {
            tensors.push(Entry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                group,
                step,
                offset: payload.len(),
            });
            payload.extend_from_slice(t.data());
        };
        for p in self.params.iter() {
            push(&p.name, EntryKind::Param, &p.value, Some(p.group), None);
        }
        for (name, st) in &self.optimizer.state {
            push(name, EntryKind::AdamM, &st.m, None, Some(st.step));
            push(name, EntryKind::AdamV, &st.v, None, Some(st.step));
        }
        let header = Header {
            config: self.config.clone(),
            classes: self.classes,
            modalities: self.modalities.clone(),
            fingerprint: self.fingerprint.clone(),
            epoch: self.epoch,
            scaler: self.scaler.clone(),
            betas: [self.optimizer.beta1, self.optimizer.beta2],
            eps: self.optimizer.eps,
            weight_decay_hg: self.optimizer.weight_decay_hg,
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |m: String| HydaError::format(format!("{origin}: {m}"));
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint (bad magic or truncated)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch".into()));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&body[MAGIC.len()..MAGIC.len() + 8]);
        let hlen = u64::from_le_bytes(len) as usize;
        let hstart = MAGIC.len() + 8;
        let header_bytes = body
            .get(hstart..hstart.saturating_add(hlen))
            .ok_or_else(|| bad("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(format!("header: {e}")))?;
        let data = &body[hstart + hlen..];
        if data.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values".into()));
        }
        let read = |e: &Entry| -> Result<Tensor> {
            let n = Tensor::numel(&e.shape);
            let bytes = data
                .get(e.offset * 8..(e.offset + n) * 8)
                .ok_or_else(|| bad(format!("tensor {} lies outside the payload", e.name)))?;
            let vals = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            Tensor::new(&e.shape, vals).map_err(|err| bad(format!("tensor {}: {err}", e.name)))
        };

        let arch = Architecture::from_shapes(&header.config, &header.modalities, header.classes)?;
        let template = arch.init_params(0, FusionInit::Zero)?;
        let mut dir: BTreeMap<(String, EntryKind), &Entry> = BTreeMap::new();
        for e in &header.tensors {
            if dir.insert((e.name.clone(), e.kind), e).is_some() {
                return Err(bad(format!("duplicate tensor entry {}", e.name)));
            }
        }
        let mut params = ModelParams::new();
        let mut optimizer = AdamW::new(header.weight_decay_hg);
        optimizer.beta1 = header.betas[0];
        optimizer.beta2 = header.betas[1];
        optimizer.eps = header.eps;
        for t in template.iter() {
            let e = dir
                .remove(&(t.name.clone(), EntryKind::Param))
                .ok_or_else(|| bad(format!("missing tensor entry {}", t.name)))?;
            if e.shape != t.value.shape() {
                return Err(bad(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    t.name,
                    e.shape,
                    t.value.shape()
                )));
            }
            params.insert(&t.name, read(e)?, e.group.unwrap_or(t.group))?;
            let m = dir.remove(&(t.name.clone(), EntryKind::AdamM));
            let v = dir.remove(&(t.name.clone(), EntryKind::AdamV));
            match (m, v) {
                (Some(m), Some(v)) => {
                    let (mt, vt) = (read(m)?, read(v)?);
                    if mt.shape() != t.value.shape() || vt.shape() != t.value.shape() {
                        return Err(bad(format!(
                            "optimizer moments for {} have the wrong shape",
                            t.name
                        )));
                    }
                    optimizer.state.insert(
                        t.name.clone(),
                        Moments {
                            step: m.step.unwrap_or(0),
                            m: mt,
                            v: vt,
                        },
                    );
                }
                (None, None) => {}
                _ => return Err(bad(format!("incomplete optimizer moments for {}", t.name))),
            }
        }
        if let Some(((name, _), _)) = dir.into_iter().next() {
            return Err(bad(format!("unexpected tensor entry {name}")));
        }
        Ok(Self {
            config: header.config,
            classes: header.classes,
            modalities: header.modalities,
            fingerprint: header.fingerprint,
            epoch: header.epoch,
            scaler: header.scaler,
            params,
            optimizer,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| HydaError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| HydaError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}
