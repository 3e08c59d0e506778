//! Tabular encoder, discriminative head, the four-term loss and prediction averaging.

use serde::{Deserialize, Serialize};

use crate::error::{HydaError, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct MlpLayers {
    pub layer1_weight: Var,
    pub layer1_bias: Var,
    pub layer2_weight: Var,
    pub layer2_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscHead {
    pub weight: Var,
    pub bias: Var,
}

fn check_width(g: &Graph, x: Var, w: Var, what: &str) -> Result<()> {
    let (xs, ws) = (g.shape(x), g.shape(w));
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(HydaError::shape(format!("{what}: input {xs:?} vs weight {ws:?}")));
    }
    Ok(())
}

/// `relu(x W1 + b1) W2 + b2` for `[B, T]` tabular rows.
pub fn mlp_encode(g: &mut Graph, x: Var, mlp: MlpLayers) -> Result<Var> {
    check_width(g, x, mlp.layer1_weight, "mlp_encode")?;
    let h = g.matmul(x, mlp.layer1_weight)?;
    let h = g.add_row_bias(h, mlp.layer1_bias)?;
    let h = g.relu(h);
    let o = g.matmul(h, mlp.layer2_weight)?;
    g.add_row_bias(o, mlp.layer2_bias)
}

/// `softmax(f W + b)` over concatenated enhanced embeddings `[B, sum E_m]`.
pub fn discriminative_classify(g: &mut Graph, f: Var, head: DiscHead) -> Result<Var> {
    check_width(g, f, head.weight, "discriminative_classify")?;
    let z = g.matmul(f, head.weight)?;
    let z = g.add_row_bias(z, head.bias)?;
    g.softmax(z)
}

/// Focal class weights: one value for every class or one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FocalAlpha {
    Uniform(f64),
    PerClass(Vec<f64>),
}

impl Default for FocalAlpha {
    fn default() -> Self {
        FocalAlpha::Uniform(1.0)
    }
}

impl FocalAlpha {
    pub fn expand(&self, classes: usize) -> Result<Vec<f64>> {
        let v = match self {
            FocalAlpha::Uniform(a) => vec![*a; classes],
            FocalAlpha::PerClass(v) if v.len() == classes => v.clone(),
            FocalAlpha::PerClass(v) => {
                return Err(HydaError::config(format!(
                    "focal_alpha has {} entries for {classes} classes",
                    v.len()
                )))
            }
        };
        if v.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(HydaError::config(format!(
                "focal_alpha {v:?} must be finite and >= 0"
            )));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_g: f64,
    pub fl_g: f64,
    pub ce_d: f64,
    pub fl_d: f64,
    pub total: f64,
}

/// `CE + FL` summed over whichever heads are present. Absent heads report
/// zero terms.
pub fn total_loss(
    g: &mut Graph,
    p_g: Option<Var>,
    p_d: Option<Var>,
    labels: &[usize],
    gamma: f64,
    alpha: &[f64],
) -> Result<(Var, LossBreakdown)> {
    if let (Some(a), Some(b)) = (p_g, p_d) {
        if g.shape(a) != g.shape(b) {
            return Err(crate::error::shape_mismatch("total_loss", g.shape(a), g.shape(b)));
        }
    }
    let mut out = LossBreakdown::default();
    let mut terms = Vec::with_capacity(4);
    for (p, ce_out, fl_out) in [
        (p_g, &mut out.ce_g, &mut out.fl_g),
        (p_d, &mut out.ce_d, &mut out.fl_d),
    ] {
        let Some(p) = p else { continue };
        let ce = g.cross_entropy(p, labels)?;
        let fl = g.focal_loss(p, labels, gamma, alpha)?;
        *ce_out = g.value(ce).data()[0];
        *fl_out = g.value(fl).data()[0];
        terms.extend([ce, fl]);
    }
    let mut total = *terms
        .first()
        .ok_or_else(|| HydaError::config("total_loss needs at least one head"))?;
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    out.total = g.value(total).data()[0];
    Ok((total, out))
}

/// `(p_g + p_d) / 2`.
pub fn average_prediction(p_g: &Tensor, p_d: &Tensor) -> Result<Tensor> {
    if p_g.shape() != p_d.shape() {
        return Err(crate::error::shape_mismatch(
            "average_prediction",
            p_g.shape(),
            p_d.shape(),
        ));
    }
    let data = p_g
        .data()
        .iter()
        .zip(p_d.data())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Tensor::new(p_g.shape(), data)
}

/// Per-subject head outputs. Single-head models leave the other head empty
/// and use their own head as `p_final`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub p_g: Option<Tensor>,
    pub p_d: Option<Tensor>,
    pub p_final: Tensor,
}

impl Prediction {
    pub fn new(p_g: Option<Tensor>, p_d: Option<Tensor>) -> Result<Self> {
        let p_final = match (&p_g, &p_d) {
            (Some(a), Some(b)) => average_prediction(a, b)?,
            (Some(a), None) | (None, Some(a)) => a.clone(),
            (None, None) => return Err(HydaError::config("prediction needs at least one head")),
        };
        Ok(Self { p_g, p_d, p_final })
    }
}

#[cfg(test)]
mod tests;
