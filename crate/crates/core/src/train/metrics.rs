use serde::{Deserialize, Serialize};

use crate::error::{HydaError, Result};
use crate::numerics::Tensor;

/// Classification metrics as fractions in `[0, 1]`. SPE, SEN and AUC are
/// binary-only; for more classes F1 is macro-averaged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub f1: f64,
    pub spe: Option<f64>,
    pub sen: Option<f64>,
    pub auc: Option<f64>,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["acc", "f1", "spe", "sen", "auc"];

    pub fn values(&self) -> [Option<f64>; 5] {
        [Some(self.acc), Some(self.f1), self.spe, self.sen, self.auc]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES
            .iter()
            .position(|n| *n == name)
            .and_then(|i| self.values()[i])
    }
}

/// Argmax with ties to the lower class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

/// Mann-Whitney AUC of `scores` for `positive` labels; ties score one half.
pub fn auc(scores: &[f64], is_positive: &[bool]) -> Result<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(is_positive)
        .filter(|p| *p.1)
        .map(|p| *p.0)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(is_positive)
        .filter(|p| !*p.1)
        .map(|p| *p.0)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(HydaError::Metric("AUC needs both classes present".into()));
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

pub fn compute_metrics(p_final: &Tensor, labels: &[usize], positive_class: usize) -> Result<Metrics> {
    let shape = p_final.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(HydaError::shape(format!(
            "metrics: predictions {shape:?} for {} labels",
            labels.len()
        )));
    }
    let k = shape[1];
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(HydaError::Label(format!(
            "label {y} out of range for {k} classes"
        )));
    }
    if positive_class >= k {
        return Err(HydaError::config(format!(
            "positive class {positive_class} of {k}"
        )));
    }
    let pred: Vec<usize> = (0..labels.len()).map(|i| argmax(p_final.row(i))).collect();
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    let acc = ratio(correct, labels.len());
    let count =
        |f: &dyn Fn(usize, usize) -> bool| pred.iter().zip(labels).filter(|(p, y)| f(**p, **y)).count();
    if k != 2 {
        let macro_f1 = (0..k)
            .map(|c| {
                let tp = count(&|p, y| p == c && y == c);
                let fp = count(&|p, y| p == c && y != c);
                let fn_ = count(&|p, y| p != c && y == c);
                f1(tp, fp, fn_)
            })
            .sum::<f64>()
            / k as f64;
        return Ok(Metrics {
            acc,
            f1: macro_f1,
            spe: None,
            sen: None,
            auc: None,
        });
    }
    let c = positive_class;
    let tp = count(&|p, y| p == c && y == c);
    let fp = count(&|p, y| p == c && y != c);
    let fn_ = count(&|p, y| p != c && y == c);
    let tn = count(&|p, y| p != c && y != c);
    let scores: Vec<f64> = (0..labels.len()).map(|i| p_final.row(i)[c]).collect();
    let is_pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
    Ok(Metrics {
        acc,
        f1: f1(tp, fp, fn_),
        spe: Some(ratio(tn, tn + fp)),
        sen: Some(ratio(tp, tp + fn_)),
        auc: Some(auc(&scores, &is_pos)?),
    })
}
