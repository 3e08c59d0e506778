//! Subject-conditioned kernel generation and the multi-scale fusion path.
//!
//! A hypergraph embedding `[1, C]` is folded into a `[1, C/27, 3, 3, 3]`
//! volume, expanded by two pointwise convolutions (with an axis swap in
//! between) into a `[C_out, C_hid, 3, 3, 3]` kernel bank, and that bank is
//! convolved with the subject's own feature map.

use serde::{Deserialize, Serialize};

use crate::error::{HydaError, Result};
use crate::numerics::{Graph, Im2Col, Var};

/// Graph handles for one kernel generator.
#[derive(Debug, Clone, Copy)]
pub struct KernelGenerator {
    /// `[C_hid, C/27]`
    pub conv1_weight: Var,
    pub conv1_bias: Var,
    /// `[C_out, 1]`
    pub conv2_weight: Var,
    pub conv2_bias: Var,
}

/// Graph handles for the merge (`conv3`), gate (`conv4`) and body (`conv5`)
/// pointwise convolutions.
#[derive(Debug, Clone, Copy)]
pub struct FusionLayers {
    pub conv3_weight: Var,
    pub conv3_bias: Var,
    pub conv4_weight: Var,
    pub conv4_bias: Var,
    pub conv5_weight: Var,
    pub conv5_bias: Var,
}

/// Weights stored by one generator, biases excluded.
pub fn generator_weight_count(c: usize, c_hid: usize, c_out: usize) -> usize {
    c / 27 * c_hid + c_out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelAccounting {
    pub c: usize,
    pub c_hid: usize,
    pub c_out: usize,
    /// `(C/27) * C_hid + C_out`
    pub weights: usize,
    pub weights_with_bias: usize,
    /// `C * C_hid + C_out`, the count if conv1 saw all C channels unfolded.
    pub unfolded_weights: usize,
    pub note: String,
}

impl KernelAccounting {
    pub fn new(c: usize, c_hid: usize, c_out: usize) -> Self {
        let weights = generator_weight_count(c, c_hid, c_out);
        let unfolded_weights = c * c_hid + c_out;
        let note = format!(
            "a generator stores (C/27)*C_hid + C_out = {}*{} + {} = {} weights; \
             the figure C*C_hid + C_out = {} (~{:.1}M) would require conv1 to read all {} \
             channels before the 3x3x3 fold and does not match the stored count",
            c / 27,
            c_hid,
            c_out,
            weights,
            unfolded_weights,
            unfolded_weights as f64 / 1e6,
            c
        );
        Self {
            c,
            c_hid,
            c_out,
            weights,
            weights_with_bias: weights + c_hid + c_out,
            unfolded_weights,
            note,
        }
    }
}

/// `[1, C]` (or `[1, C, 1, 1, 1]`) tap embedding to a `[C_out, C_hid, 3, 3, 3]` kernel bank.
pub fn generate_kernels(g: &mut Graph, tap: Var, gen: KernelGenerator) -> Result<Var> {
    let c = g.value(tap).len();
    if g.shape(tap)[0] != 1 {
        return Err(HydaError::shape(format!(
            "kernel generator expects a single subject, got {:?}",
            g.shape(tap)
        )));
    }
    if !c.is_multiple_of(27) {
        return Err(HydaError::config(format!("tap width {c} is not divisible by 27")));
    }
    let folded = g.reshape(tap, &[1, c / 27, 3, 3, 3])?;
    let hidden = g.pointwise_conv3d(folded, gen.conv1_weight, Some(gen.conv1_bias))?;
    let swapped = g.swap_axes01(hidden)?;
    let expanded = g.pointwise_conv3d(swapped, gen.conv2_weight, Some(gen.conv2_bias))?;
    g.swap_axes01(expanded)
}

/// `ReLU(kernels (*) feature_map)` with "same" 3x3x3 convolution.
pub fn dynamic_fuse(g: &mut Graph, kernels: Var, feature_map: Var) -> Result<Var> {
    let conv = g.conv3d_same(feature_map, kernels)?;
    Ok(g.relu(conv))
}

/// [`dynamic_fuse`] against a constant map given as precomputed columns.
pub fn dynamic_fuse_cols(g: &mut Graph, kernels: Var, feature_map: &Im2Col) -> Result<Var> {
    let conv = g.conv3d_cols(feature_map, kernels)?;
    Ok(g.relu(conv))
}

/// Merge the two tap outputs and apply the squeeze-style channel gate:
/// `sigmoid(conv4(pool(O))) * relu(conv5(O))` with `O = conv3([O1, O2])`.
pub fn merge_enhance(g: &mut Graph, o1: Var, o2: Var, layers: FusionLayers) -> Result<Var> {
    if g.shape(o1) != g.shape(o2) {
        return Err(crate::error::shape_mismatch(
            "merge_enhance",
            g.shape(o1),
            g.shape(o2),
        ));
    }
    let cat = g.concat(&[o1, o2], 1)?;
    let merged = g.pointwise_conv3d(cat, layers.conv3_weight, Some(layers.conv3_bias))?;
    let pooled = g.global_avg_pool(merged)?;
    let squeezed = g.pointwise_conv3d(pooled, layers.conv4_weight, Some(layers.conv4_bias))?;
    let gate = g.sigmoid(squeezed);
    let body = g.pointwise_conv3d(merged, layers.conv5_weight, Some(layers.conv5_bias))?;
    let body = g.relu(body);
    g.channel_scale(body, gate)
}

/// `x + flatten(o_hat)` for a `[1, E]` embedding row.
pub fn residual_enhance(g: &mut Graph, x: Var, o_hat: Var) -> Result<Var> {
    let e = g.value(x).len();
    let flat = g.flatten(o_hat)?;
    if g.value(flat).len() != e {
        return Err(HydaError::shape(format!(
            "residual: flattened map has {} values, embedding has {e}",
            g.value(flat).len()
        )));
    }
    let x = g.reshape(x, &[1, e])?;
    g.add(x, flat)
}

/// Per-modality inputs to [`fuse_all`].
pub struct ImagingInput<'a> {
    /// `[B, E_m]`
    pub embeddings: Var,
    /// Columns of one `[1, C_hid, D, H, W]` map per subject in batch order.
    pub maps: Vec<&'a Im2Col>,
}

/// Runs the fusion path for a batch and returns the enhanced `[B, E_m]`
/// embeddings, one per imaging modality in input order. Non-imaging
/// modalities have no feature map and are left to the caller unchanged.
pub fn fuse_all(
    g: &mut Graph,
    tap1: Var,
    tap2: Var,
    imaging: &[ImagingInput<'_>],
    gen1: KernelGenerator,
    gen2: KernelGenerator,
    layers: FusionLayers,
) -> Result<Vec<Var>> {
    let b = g.shape(tap1)[0];
    if g.shape(tap2)[0] != b {
        return Err(crate::error::shape_mismatch(
            "fuse_all taps",
            g.shape(tap1),
            g.shape(tap2),
        ));
    }
    let mut rows: Vec<Vec<Var>> = vec![Vec::with_capacity(b); imaging.len()];
    for n in 0..b {
        let f1 = g.select_row(tap1, n)?;
        let f2 = g.select_row(tap2, n)?;
        let w1 = generate_kernels(g, f1, gen1)?;
        let w2 = generate_kernels(g, f2, gen2)?;
        for (m, input) in imaging.iter().enumerate() {
            if input.maps.len() != b || g.shape(input.embeddings)[0] != b {
                return Err(HydaError::shape(format!(
                    "modality {m}: {} maps / embeddings {:?} for batch {b}",
                    input.maps.len(),
                    g.shape(input.embeddings)
                )));
            }
            let o1 = dynamic_fuse_cols(g, w1, input.maps[n])?;
            let o2 = dynamic_fuse_cols(g, w2, input.maps[n])?;
            let o_hat = merge_enhance(g, o1, o2, layers)?;
            let x = g.select_row(input.embeddings, n)?;
            rows[m].push(residual_enhance(g, x, o_hat)?);
        }
    }
    rows.into_iter().map(|r| g.concat(&r, 0)).collect()
}
