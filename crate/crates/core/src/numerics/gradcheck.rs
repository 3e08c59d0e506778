use serde::Serialize;

use super::ModelParams;
use crate::error::{HydaError, Result};

/// Which entries of each parameter tensor get a finite-difference probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    All,
    /// At most this many evenly strided entries per tensor.
    Strided(usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub per_param: Vec<ParamCheck>,
}

/// Central-difference check of analytic gradients stored in `params`.
///
/// The error for one entry is `|analytic - fd| / max(1, |analytic|)`.
/// A parameter with `grad = None` is treated as having a zero gradient.
pub fn finite_diff_check<F>(mut f: F, params: &ModelParams, h: f64, probe: Probe) -> Result<GradCheckReport>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(HydaError::config(format!(
            "finite-difference step {h} outside [1e-6, 1e-3]"
        )));
    }
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    let mut per_param = Vec::with_capacity(names.len());
    let mut checked = 0;
    let mut worst = 0.0f64;
    for name in names {
        let original = params.get(&name).expect("name from iteration");
        let n = original.value.len();
        let indices: Vec<usize> = match probe {
            Probe::All => (0..n).collect(),
            Probe::Strided(m) if m >= n => (0..n).collect(),
            Probe::Strided(m) => (0..m).map(|j| j * n / m).collect(),
        };
        let mut local = 0.0f64;
        for &i in &indices {
            let x0 = original.value.data()[i];
            let analytic = original.grad.as_ref().map_or(0.0, |g| g.data()[i]);
            work.get_mut(&name).unwrap().value.data_mut()[i] = x0 + h;
            let fp = f(&work)?;
            work.get_mut(&name).unwrap().value.data_mut()[i] = x0 - h;
            let fm = f(&work)?;
            work.get_mut(&name).unwrap().value.data_mut()[i] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(HydaError::Numeric(format!(
                    "non-finite objective probing {name}[{i}]"
                )));
            }
            let fd = (fp - fm) / (2.0 * h);
            let err = (analytic - fd).abs() / analytic.abs().max(1.0);
            local = local.max(err);
        }
        checked += indices.len();
        worst = worst.max(local);
        per_param.push(ParamCheck {
            name,
            checked: indices.len(),
            max_rel_error: local,
        });
    }
    Ok(GradCheckReport {
        step: h,
        checked,
        max_rel_error: worst,
        per_param,
    })
}
