//! Parameter layout and the forward pass shared by training, evaluation and
//! gradient checking.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cohort::{CohortDataset, ModalityDescriptor};
use crate::config::{Ablation, FusionInit, RunConfig};
use crate::error::{HydaError, Result};
use crate::fusion::{fuse_all, FusionLayers, ImagingInput, KernelGenerator};
use crate::heads::{
    discriminative_classify, mlp_encode, total_loss, DiscHead, LossBreakdown, MlpLayers, Prediction,
};
use crate::hypergraph::{
    build_incidence, fuse, hgconv, hypergraph_classify, vertex_feature_dropout, Backend, HgLayer, Incidence,
};
use crate::numerics::{BoundParams, Graph, Im2Col, ModelParams, Tensor, Var, WeightDecayGroup};

#[derive(Debug, Clone, PartialEq)]
pub struct ImagingSlot {
    pub name: String,
    pub emb_dim: usize,
    pub map_shape: [usize; 4],
}

/// Shapes and switches resolved from a config against a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub imaging: Vec<ImagingSlot>,
    pub tabular: Option<(String, usize)>,
    pub classes: usize,
    pub c: usize,
    pub c_hid: usize,
    pub c_out: usize,
    pub c_res: usize,
    pub k: usize,
    pub backend: Backend,
    pub ablation: Ablation,
    pub dropout_p: f64,
}

impl Architecture {
    pub fn new(cfg: &RunConfig, ds: &CohortDataset) -> Result<Self> {
        Self::from_shapes(cfg, &ds.modalities, ds.num_classes)
    }

    pub fn from_shapes(cfg: &RunConfig, modalities: &[ModalityDescriptor], classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut imaging = Vec::new();
        let mut tabular = None;
        for m in cfg.selected_modalities(modalities)? {
            match m.map_shape {
                Some(map_shape) if m.is_imaging() => imaging.push(ImagingSlot {
                    name: m.name.clone(),
                    emb_dim: m.emb_dim,
                    map_shape,
                }),
                _ => tabular = Some((m.name.clone(), m.emb_dim)),
            }
        }
        if cfg.ablation.uses_fusion() {
            for s in &imaging {
                let [ch, d, h, w] = s.map_shape;
                if ch != cfg.c_hid {
                    return Err(HydaError::config(format!(
                        "{}: feature map has {ch} channels but C_hid = {}",
                        s.name, cfg.c_hid
                    )));
                }
                if cfg.c_res * d * h * w != s.emb_dim {
                    return Err(HydaError::config(format!(
                        "{}: C_res*D*H*W = {}*{d}*{h}*{w} != E_m = {}",
                        s.name, cfg.c_res, s.emb_dim
                    )));
                }
            }
        }
        Ok(Self {
            imaging,
            tabular,
            classes,
            c: cfg.c,
            c_hid: cfg.c_hid,
            c_out: cfg.c_out,
            c_res: cfg.c_res,
            k: cfg.k,
            backend: cfg.backend,
            ablation: cfg.ablation,
            dropout_p: cfg.dropout_p,
        })
    }

    /// Width of the concatenated node features.
    pub fn feature_width(&self) -> usize {
        self.imaging.iter().map(|s| s.emb_dim).sum::<usize>() + self.tabular.as_ref().map_or(0, |t| t.1)
    }

    pub fn fusion_active(&self) -> bool {
        self.ablation.uses_fusion() && !self.imaging.is_empty()
    }

    /// Registers every parameter this ablation trains.
    pub fn init_params(&self, seed: u64, fusion_init: FusionInit) -> Result<ModelParams> {
        use WeightDecayGroup::{Hypergraph, Other};
        let mut p = ModelParams::new();
        let linear = |p: &mut ModelParams, name: &str, din: usize, dout: usize, group| -> Result<()> {
            p.insert_normal(
                &format!("{name}.weight"),
                &[din, dout],
                (1.0 / din as f64).sqrt(),
                seed,
                group,
            )?;
            p.insert_zeros(&format!("{name}.bias"), &[dout], group)
        };
        if let Some((_, t)) = &self.tabular {
            linear(&mut p, "mlp.layer1", *t, *t, Other)?;
            linear(&mut p, "mlp.layer2", *t, *t, Other)?;
        }
        let width = self.feature_width();
        if self.ablation.uses_hypergraph() {
            linear(&mut p, "hg.layer1", width, self.c, Hypergraph)?;
            linear(&mut p, "hg.layer2", self.c, self.c, Hypergraph)?;
            linear(&mut p, "hg.classifier", self.c, self.classes, Hypergraph)?;
        }
        if self.ablation.uses_disc() {
            linear(&mut p, "disc", width, self.classes, Other)?;
        }
        if self.fusion_active() {
            let cf = self.c / 27;
            let pointwise: [(&str, usize, usize); 7] = [
                ("gen1.conv1", cf, self.c_hid),
                ("gen1.conv2", 1, self.c_out),
                ("gen2.conv1", cf, self.c_hid),
                ("gen2.conv2", 1, self.c_out),
                ("fusion.conv3", 2 * self.c_out, self.c_hid),
                ("fusion.conv4", self.c_hid, self.c_res),
                ("fusion.conv5", self.c_hid, self.c_res),
            ];
            for (name, cin, cout) in pointwise {
                let w = format!("{name}.weight");
                match fusion_init {
                    FusionInit::Random => {
                        // generated kernels start at the fan-in scale of the dynamic convolution
                        let fan_in = if name.ends_with("conv2") {
                            self.c_hid * 27
                        } else {
                            cin
                        };
                        p.insert_normal(&w, &[cout, cin], (1.0 / fan_in as f64).sqrt(), seed, Other)?
                    }
                    FusionInit::Zero => p.insert_zeros(&w, &[cout, cin], Other)?,
                }
                p.insert_zeros(&format!("{name}.bias"), &[cout], Other)?;
            }
        }
        Ok(p)
    }
}

/// Head outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub p_g: Option<Var>,
    pub p_d: Option<Var>,
}

fn rows(ids: &[usize], f: impl Fn(usize) -> Result<Vec<f64>>) -> Result<Tensor> {
    let mut data = Vec::new();
    for &i in ids {
        data.extend(f(i)?);
    }
    let width = data.len() / ids.len().max(1);
    Tensor::new(&[ids.len(), width], data)
}

fn missing(what: &str, id: &str) -> HydaError {
    HydaError::format(format!("subject {id} has no {what}"))
}

/// A cohort paired with the convolution columns of its feature maps, which
/// are gathered once and reused by every batch.
#[derive(Debug)]
pub struct ModelInput<'a> {
    pub ds: &'a CohortDataset,
    cols: Vec<BTreeMap<String, Im2Col>>,
}

impl<'a> ModelInput<'a> {
    pub fn new(arch: &Architecture, ds: &'a CohortDataset) -> Result<Self> {
        let mut cols = Vec::with_capacity(ds.subjects.len());
        for sub in &ds.subjects {
            let mut per = BTreeMap::new();
            if arch.fusion_active() {
                for s in &arch.imaging {
                    let map = sub
                        .feature_maps
                        .get(&s.name)
                        .ok_or_else(|| missing("feature map", &sub.subject_id))?;
                    per.insert(s.name.clone(), Im2Col::new(map)?);
                }
            }
            cols.push(per);
        }
        Ok(Self { ds, cols })
    }

    fn columns(&self, i: usize, name: &str) -> Result<&Im2Col> {
        self.cols[i]
            .get(name)
            .ok_or_else(|| missing("feature map", &self.ds.subjects[i].subject_id))
    }

    fn labels(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.ds.subjects[i].label).collect()
    }
}

/// Builds the batch graph over subjects `ids` and returns the head outputs.
/// Dropout is applied only when `training`.
pub fn forward<R: Rng>(
    g: &mut Graph,
    arch: &Architecture,
    bound: &BoundParams,
    input: &ModelInput<'_>,
    ids: &[usize],
    training: bool,
    rng: &mut R,
) -> Result<Forward> {
    let ds = input.ds;
    if ids.is_empty() {
        return Err(HydaError::config("empty subject batch"));
    }
    let mut raw = Vec::new();
    for s in &arch.imaging {
        let t = rows(ids, |i| {
            let sub = &ds.subjects[i];
            sub.embeddings
                .get(&s.name)
                .cloned()
                .ok_or_else(|| missing(&s.name, &sub.subject_id))
        })?;
        raw.push((s.name.clone(), t));
    }
    let tab_raw = match &arch.tabular {
        Some((name, _)) => Some((
            name.clone(),
            rows(ids, |i| {
                let sub = &ds.subjects[i];
                sub.tabular.clone().ok_or_else(|| missing(name, &sub.subject_id))
            })?,
        )),
        None => None,
    };

    let mut blocks: Vec<Var> = raw.iter().map(|(_, t)| g.constant(t.clone())).collect();
    if let Some((_, t)) = &tab_raw {
        let x = g.constant(t.clone());
        let mlp = MlpLayers {
            layer1_weight: bound.get("mlp.layer1.weight")?,
            layer1_bias: bound.get("mlp.layer1.bias")?,
            layer2_weight: bound.get("mlp.layer2.weight")?,
            layer2_bias: bound.get("mlp.layer2.bias")?,
        };
        blocks.push(mlp_encode(g, x, mlp)?);
    }
    let x = g.concat(&blocks, 1)?;

    let mut taps = None;
    let mut p_g = None;
    if arch.ablation.uses_hypergraph() {
        let parts = raw
            .iter()
            .chain(tab_raw.iter())
            .map(|(name, t)| Ok((name.clone(), build_incidence(t, arch.k, arch.backend)?)))
            .collect::<Result<Vec<(String, Incidence)>>>()?;
        let hg = fuse(&parts, None)?;
        let layer = |name: &str| -> Result<HgLayer> {
            Ok(HgLayer {
                weight: bound.get(&format!("{name}.weight"))?,
                bias: bound.get(&format!("{name}.bias"))?,
            })
        };
        let xin = vertex_feature_dropout(g, x, arch.dropout_p, training, rng)?;
        let f1 = hgconv(g, &hg, xin, layer("hg.layer1")?, true)?;
        let f2 = hgconv(g, &hg, f1, layer("hg.layer2")?, true)?;
        p_g = Some(hypergraph_classify(g, &hg, f2, layer("hg.classifier")?)?);
        taps = Some((f1, f2));
    }

    let mut p_d = None;
    if arch.ablation.uses_disc() {
        let features = match taps {
            Some((f1, f2)) if arch.fusion_active() => {
                let gen = |name: &str| -> Result<KernelGenerator> {
                    Ok(KernelGenerator {
                        conv1_weight: bound.get(&format!("{name}.conv1.weight"))?,
                        conv1_bias: bound.get(&format!("{name}.conv1.bias"))?,
                        conv2_weight: bound.get(&format!("{name}.conv2.weight"))?,
                        conv2_bias: bound.get(&format!("{name}.conv2.bias"))?,
                    })
                };
                let layers = FusionLayers {
                    conv3_weight: bound.get("fusion.conv3.weight")?,
                    conv3_bias: bound.get("fusion.conv3.bias")?,
                    conv4_weight: bound.get("fusion.conv4.weight")?,
                    conv4_bias: bound.get("fusion.conv4.bias")?,
                    conv5_weight: bound.get("fusion.conv5.weight")?,
                    conv5_bias: bound.get("fusion.conv5.bias")?,
                };
                let inputs = arch
                    .imaging
                    .iter()
                    .enumerate()
                    .map(|(m, s)| {
                        let maps = ids
                            .iter()
                            .map(|&i| input.columns(i, &s.name))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(ImagingInput {
                            embeddings: blocks[m],
                            maps,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut enhanced = fuse_all(g, f1, f2, &inputs, gen("gen1")?, gen("gen2")?, layers)?;
                enhanced.extend(blocks.iter().skip(arch.imaging.len()));
                g.concat(&enhanced, 1)?
            }
            _ => x,
        };
        let head = DiscHead {
            weight: bound.get("disc.weight")?,
            bias: bound.get("disc.bias")?,
        };
        p_d = Some(discriminative_classify(g, features, head)?);
    }
    Ok(Forward { p_g, p_d })
}

/// Evaluation-mode prediction over `ids`, with one hypergraph spanning them all.
pub fn predict(
    arch: &Architecture,
    params: &ModelParams,
    input: &ModelInput<'_>,
    ids: &[usize],
) -> Result<Prediction> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    // dropout is off, so the stream is never drawn from
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let out = forward(&mut g, arch, &bound, input, ids, false, &mut unused)?;
    let take = |v: Option<Var>| v.map(|v| g.value(v).clone());
    Prediction::new(take(out.p_g), take(out.p_d))
}

/// Forward, loss and backward on one batch. Gradients land in `params`;
/// parameters the loss does not reach get `grad = None`.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads<R: Rng>(
    arch: &Architecture,
    params: &mut ModelParams,
    input: &ModelInput<'_>,
    ids: &[usize],
    gamma: f64,
    alpha: &[f64],
    training: bool,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = forward(&mut g, arch, &bound, input, ids, training, rng)?;
    let labels = input.labels(ids);
    let (loss, parts) = objective(&mut g, out, &labels, gamma, alpha)?;
    if !parts.total.is_finite() {
        return Err(HydaError::Numeric(format!("non-finite loss {}", parts.total)));
    }
    let grads = g.backward(loss)?;
    params.collect_grads(&bound, &grads);
    Ok(parts)
}

/// Evaluation-mode loss without gradients.
pub fn eval_loss(
    arch: &Architecture,
    params: &ModelParams,
    input: &ModelInput<'_>,
    ids: &[usize],
    gamma: f64,
    alpha: &[f64],
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let out = forward(&mut g, arch, &bound, input, ids, false, &mut unused)?;
    let labels = input.labels(ids);
    Ok(objective(&mut g, out, &labels, gamma, alpha)?.1)
}

/// The four-term loss when both heads exist; cross-entropy alone for a
/// single-head model.
pub fn objective(
    g: &mut Graph,
    out: Forward,
    labels: &[usize],
    gamma: f64,
    alpha: &[f64],
) -> Result<(Var, LossBreakdown)> {
    match (out.p_g, out.p_d) {
        (Some(_), Some(_)) => total_loss(g, out.p_g, out.p_d, labels, gamma, alpha),
        (Some(p), None) | (None, Some(p)) => {
            let ce = g.cross_entropy(p, labels)?;
            let v = g.value(ce).data()[0];
            let mut parts = LossBreakdown {
                total: v,
                ..Default::default()
            };
            if out.p_g.is_some() {
                parts.ce_g = v;
            } else {
                parts.ce_d = v;
            }
            Ok((ce, parts))
        }
        (None, None) => Err(HydaError::config("model has no head")),
    }
}
