//! Synthetic multi-modal cohorts standing in for a frozen image encoder.
//!
//! Every subject carries a latent matrix `z[class][part]`, one part per
//! modality. The label is the class with the largest summed score. Modality
//! `m` observes `view_m[c] = kappa * z[c][m] + (1 - kappa) * score[c] / sqrt(P)`,
//! so with `kappa = 1` each modality only sees its own part and no single
//! modality determines the label.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CohortDataset, ModalityDescriptor, ModalityKind, SubjectRecord};
use crate::error::{HydaError, Result};
use crate::numerics::{fnv1a, Tensor};

/// Raw non-imaging feature count (age, sex, education, genotype, two scores).
pub const TABULAR_WIDTH: usize = 6;
const LABEL_MARGIN: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub subjects: usize,
    pub imaging: usize,
    pub tabular: bool,
    pub emb_dim: usize,
    /// `[C_hid, D, H, W]`
    pub map_dims: [usize; 4],
    pub classes: usize,
    pub imbalance: f64,
    pub complementarity: f64,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            subjects: 200,
            imaging: 2,
            tabular: true,
            emb_dim: 128,
            map_dims: [16, 4, 4, 4],
            classes: 2,
            imbalance: 3.0,
            complementarity: 0.5,
            noise: 0.1,
        }
    }
}

fn imaging_name(i: usize) -> String {
    match i {
        0 => "mri".to_string(),
        1 => "pet".to_string(),
        _ => format!("img{i}"),
    }
}

/// Class sizes with geometric decay from class 0 to class K-1, the largest
/// over the smallest equal to `imbalance`; rounded by largest remainder.
pub(crate) fn class_sizes(n: usize, k: usize, imbalance: f64) -> Result<Vec<usize>> {
    let weights: Vec<f64> = (0..k)
        .map(|c| imbalance.powf(-(c as f64) / (k - 1) as f64))
        .collect();
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[c] += 1;
        rest -= 1;
    }
    if let Some(c) = sizes.iter().position(|&s| s < 2) {
        return Err(HydaError::config(format!(
            "class {c} would have {} subjects (sizes {sizes:?}); need at least 2",
            sizes[c]
        )));
    }
    Ok(sizes)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| gaussian(rng) * scale).collect()
}

fn matvec(m: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    m.chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Fixed per-modality maps from latent views to observations.
struct ModalityMaps {
    signal: Vec<f64>,
    offset: Vec<f64>,
    amp_signal: Vec<f64>,
    extent: Vec<f64>,
    centers: Vec<[f64; 3]>,
}

impl ModalityMaps {
    fn draw(rng: &mut ChaCha8Rng, width: usize, k: usize, map: Option<[usize; 4]>) -> Self {
        let signal = gaussian_matrix(rng, width, k, 1.0);
        let offset = gaussian_matrix(rng, width, 1, 1.0);
        let (amp_signal, extent, centers) = match map {
            Some([c, d, h, w]) => {
                let amp_signal = gaussian_matrix(rng, c, k, 1.0 / (k as f64).sqrt());
                let extent = gaussian_matrix(rng, c, k, 1.0 / (k as f64).sqrt());
                let centers = (0..c)
                    .map(|_| {
                        let u = |rng: &mut ChaCha8Rng, n: usize| {
                            let g: f64 = gaussian(rng);
                            (n as f64 - 1.0) * (0.5 + 0.25 * g.tanh())
                        };
                        [u(rng, d), u(rng, h), u(rng, w)]
                    })
                    .collect();
                (amp_signal, extent, centers)
            }
            None => Default::default(),
        };
        Self {
            signal,
            offset,
            amp_signal,
            extent,
            centers,
        }
    }
}

/// Generates a cohort; identical `(spec, seed)` gives identical output.
pub fn synth_cohort(spec: &SynthSpec, seed: u64) -> Result<CohortDataset> {
    let k = spec.classes;
    if k < 2 {
        return Err(HydaError::config("need at least 2 classes"));
    }
    if spec.subjects < 2 * k {
        return Err(HydaError::config(format!(
            "{} subjects is fewer than 2 per class for {k} classes",
            spec.subjects
        )));
    }
    if !spec.imbalance.is_finite() || spec.imbalance < 1.0 {
        return Err(HydaError::config(format!(
            "imbalance ratio {} < 1",
            spec.imbalance
        )));
    }
    if !(0.0..=1.0).contains(&spec.complementarity) {
        return Err(HydaError::config(format!(
            "complementarity {} outside [0, 1]",
            spec.complementarity
        )));
    }
    if spec.noise.is_nan() || spec.noise < 0.0 {
        return Err(HydaError::config(format!("noise sigma {} < 0", spec.noise)));
    }
    if spec.imaging == 0 && !spec.tabular {
        return Err(HydaError::config("cohort needs at least one modality"));
    }
    let [c_hid, d, h, w] = spec.map_dims;
    let vox = d * h * w;
    if spec.imaging > 0 && (c_hid == 0 || vox == 0 || spec.emb_dim == 0 || !spec.emb_dim.is_multiple_of(vox))
    {
        return Err(HydaError::config(format!(
            "embedding width {} must be a positive multiple of D*H*W = {vox}",
            spec.emb_dim
        )));
    }
    let sizes = class_sizes(spec.subjects, k, spec.imbalance)?;

    let mut modalities: Vec<ModalityDescriptor> = (0..spec.imaging)
        .map(|i| ModalityDescriptor {
            name: imaging_name(i),
            kind: ModalityKind::Imaging,
            emb_dim: spec.emb_dim,
            map_shape: Some(spec.map_dims),
        })
        .collect();
    if spec.tabular {
        modalities.push(ModalityDescriptor {
            name: "tabular".into(),
            kind: ModalityKind::Tabular,
            emb_dim: TABULAR_WIDTH,
            map_shape: None,
        });
    }
    let parts = modalities.len();

    let mut structure_rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(b"structure"));
    let maps: Vec<ModalityMaps> = modalities
        .iter()
        .map(|m| ModalityMaps::draw(&mut structure_rng, m.emb_dim, k, m.map_shape))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(b"subjects"));
    let mut labels: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    labels.shuffle(&mut rng);

    let kappa = spec.complementarity;
    let sigma = spec.noise;
    let norm = (parts as f64).sqrt();
    let mut subjects = Vec::with_capacity(spec.subjects);
    for (idx, &y) in labels.iter().enumerate() {
        let mut z: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..parts).map(|_| gaussian(&mut rng)).collect())
            .collect();
        let score = |z: &[Vec<f64>], c: usize| z[c].iter().sum::<f64>();
        let top = (0..k)
            .max_by(|&a, &b| score(&z, a).total_cmp(&score(&z, b)))
            .unwrap();
        z.swap(top, y);
        z[y].iter_mut().for_each(|v| *v += LABEL_MARGIN / parts as f64);
        let scores: Vec<f64> = (0..k).map(|c| score(&z, c)).collect();

        let mut embeddings = BTreeMap::new();
        let mut feature_maps = BTreeMap::new();
        let mut tabular = None;
        for (p, (m, mm)) in modalities.iter().zip(&maps).enumerate() {
            let view: Vec<f64> = (0..k)
                .map(|c| kappa * z[c][p] + (1.0 - kappa) * scores[c] / norm)
                .collect();
            let sig = matvec(&mm.signal, k, &view);
            let clean: Vec<f64> = (0..m.emb_dim).map(|j| sig[j] + mm.offset[j]).collect();
            match m.kind {
                ModalityKind::Imaging => {
                    let emb: Vec<f64> = clean.iter().map(|v| v + sigma * gaussian(&mut rng)).collect();
                    embeddings.insert(m.name.clone(), emb);
                    let amps = matvec(&mm.amp_signal, k, &view);
                    let ext = matvec(&mm.extent, k, &view);
                    let mut data = Vec::with_capacity(c_hid * vox);
                    for ch in 0..c_hid {
                        let amp = amps[ch];
                        let s = 0.8 + 0.8 / (1.0 + (-ext[ch]).exp());
                        let [cz, cy, cx] = mm.centers[ch];
                        for iz in 0..d {
                            for iy in 0..h {
                                for ix in 0..w {
                                    let r2 = (iz as f64 - cz).powi(2)
                                        + (iy as f64 - cy).powi(2)
                                        + (ix as f64 - cx).powi(2);
                                    let v = amp * (-r2 / (2.0 * s * s)).exp();
                                    data.push(v);
                                }
                            }
                        }
                    }
                    feature_maps.insert(m.name.clone(), Tensor::new(&[1, c_hid, d, h, w], data)?);
                }
                ModalityKind::Tabular => {
                    let t = clean
                        .iter()
                        .map(|v| (0.5 * v).tanh() + sigma * gaussian(&mut rng))
                        .collect();
                    tabular = Some(t);
                }
            }
        }
        subjects.push(SubjectRecord {
            subject_id: format!("S{idx:04}"),
            embeddings,
            feature_maps,
            tabular,
            label: y,
        });
    }
    let ds = CohortDataset {
        modalities,
        num_classes: k,
        subjects,
    };
    ds.validate()?;
    Ok(ds)
}
