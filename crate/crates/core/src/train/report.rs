use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::fold::{train_fold, FoldResult};
use super::metrics::Metrics;
use crate::cohort::{kfold_split, CohortDataset};
use crate::config::{Ablation, RunConfig};
use crate::error::{HydaError, Result};
use crate::fusion::KernelAccounting;
use crate::model::Architecture;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: usize,
    pub seed: u64,
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

impl From<&FoldResult> for FoldRow {
    fn from(r: &FoldResult) -> Self {
        Self {
            fold: r.fold_index,
            seed: r.seed,
            metrics: r.metrics,
            best_epoch: r.best_epoch,
            epochs_run: r.epochs_run,
            train_loss: r.train_loss.clone(),
            val_loss: r.val_loss.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    /// Stored weights per kernel generator, biases excluded.
    pub kernel_generator: Option<usize>,
    pub kernel_accounting: Option<KernelAccounting>,
}

impl ParamCounts {
    pub fn of(cfg: &RunConfig, ds: &CohortDataset) -> Result<Self> {
        let arch = Architecture::new(cfg, ds)?;
        let params = arch.init_params(0, crate::config::FusionInit::Zero)?;
        let fused = params.get("gen1.conv1.weight").is_some();
        let accounting = fused.then(|| KernelAccounting::new(cfg.c, cfg.c_hid, cfg.c_out));
        Ok(Self {
            total: params.num_scalars(),
            kernel_generator: accounting.as_ref().map(|a| a.weights),
            kernel_accounting: accounting,
        })
    }
}

/// Cross-validation outcome. Metric values are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tag: String,
    pub ablation: Ablation,
    pub modalities: Vec<String>,
    pub seed: u64,
    pub fingerprint: String,
    pub config: RunConfig,
    pub folds: Vec<FoldRow>,
    pub summary: BTreeMap<String, Stat>,
    pub param_counts: ParamCounts,
}

pub fn summarize(rows: &[Metrics]) -> BTreeMap<String, Stat> {
    let mut out = BTreeMap::new();
    for name in Metrics::NAMES {
        let vals: Vec<f64> = rows.iter().filter_map(|m| m.get(name)).collect();
        if vals.len() == rows.len() {
            if let Some(s) = Stat::of(&vals) {
                out.insert(name.to_string(), s);
            }
        }
    }
    out
}

impl RunReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.get(metric).map(|s| s.mean)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per fold followed by `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,acc,f1,spe,sen,auc\n");
        let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for f in &self.folds {
            let vals: Vec<String> = f.metrics.values().iter().map(|v| cell(*v)).collect();
            let _ = writeln!(s, "fold_{},{}", f.fold, vals.join(","));
        }
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let vals: Vec<String> = Metrics::NAMES
                .iter()
                .map(|n| {
                    cell(
                        self.summary
                            .get(*n)
                            .map(|st| if pick == 0 { st.mean } else { st.std }),
                    )
                })
                .collect();
            let _ = writeln!(s, "{label},{}", vals.join(","));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("metrics.json"), &self.to_json())?;
        write_file(&dir.join("metrics.csv"), &self.to_csv())
    }
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HydaError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| HydaError::io(path, e))
}

fn modality_names(cfg: &RunConfig, ds: &CohortDataset) -> Result<Vec<String>> {
    Ok(cfg
        .selected_modalities(&ds.modalities)?
        .iter()
        .map(|m| m.name.clone())
        .collect())
}

/// Writes `fold_<i>/` beneath `dir`: checkpoint, validation predictions and loss curves.
pub fn write_fold(dir: &Path, ds: &CohortDataset, r: &FoldResult) -> Result<()> {
    let fdir = dir.join(format!("fold_{}", r.fold_index));
    std::fs::create_dir_all(&fdir).map_err(|e| HydaError::io(&fdir, e))?;
    save_checkpoint(&r.checkpoint, &fdir.join("checkpoint.hyck"))?;
    let mut pred = String::from("subject_id,label");
    for c in 0..r.val_p_final.shape()[1] {
        let _ = write!(pred, ",p{c}");
    }
    pred.push('\n');
    for (row, &i) in r.val_ids.iter().enumerate() {
        let s = &ds.subjects[i];
        let probs: Vec<String> = r.val_p_final.row(row).iter().map(f64::to_string).collect();
        let _ = writeln!(pred, "{},{},{}", s.subject_id, s.label, probs.join(","));
    }
    write_file(&fdir.join("val_predictions.csv"), &pred)?;
    let mut curve = String::from("epoch,train_loss,val_loss\n");
    for (e, (t, v)) in r.train_loss.iter().zip(&r.val_loss).enumerate() {
        let _ = writeln!(curve, "{},{t},{v}", e + 1);
    }
    write_file(&fdir.join("loss.csv"), &curve)
}

/// Trains every fold and aggregates the validation metrics. When `out` is
/// given, per-fold artifacts go to `fold_<i>/` beneath it.
pub fn cross_validate(cfg: &RunConfig, ds: &CohortDataset, out: Option<&Path>) -> Result<RunReport> {
    let tag = modality_names(cfg, ds)?.join("+");
    cross_validate_tagged(cfg, ds, out, &tag)
}

fn cross_validate_tagged(
    cfg: &RunConfig,
    ds: &CohortDataset,
    out: Option<&Path>,
    tag: &str,
) -> Result<RunReport> {
    cfg.validate()?;
    let param_counts = ParamCounts::of(cfg, ds)?;
    let splits = kfold_split(&ds.labels(), cfg.folds, cfg.seed)?;
    let mut folds = Vec::with_capacity(splits.len());
    for split in &splits {
        let r = train_fold(cfg, ds, split)?;
        if let Some(dir) = out {
            write_fold(dir, ds, &r)?;
        }
        folds.push(FoldRow::from(&r));
    }
    let metrics: Vec<Metrics> = folds.iter().map(|f| f.metrics).collect();
    let report = RunReport {
        tag: tag.to_string(),
        ablation: cfg.ablation,
        modalities: modality_names(cfg, ds)?,
        seed: cfg.seed,
        fingerprint: cfg.fingerprint(ds),
        config: cfg.clone(),
        folds,
        summary: summarize(&metrics),
        param_counts,
    };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

/// Published row for the full model on the clinical cohort, kept for
/// side-by-side display only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub row: usize,
    pub acc: f64,
    pub f1: f64,
    pub spe: f64,
    pub sen: f64,
    pub note: String,
}

pub fn published_reference() -> ReferenceRow {
    ReferenceRow {
        row: 4,
        acc: 88.09,
        f1: 70.23,
        spe: 96.43,
        sen: 62.12,
        note: "published percentages on a private clinical cohort; a documented reference, not an expected output".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub ablation: Ablation,
    pub summary: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub reference: ReferenceRow,
    pub runs: Vec<RunReport>,
}

fn summary_csv(header: &str, rows: &[(String, &BTreeMap<String, Stat>)]) -> String {
    let mut s = String::from(header);
    for n in Metrics::NAMES {
        let _ = write!(s, ",{n}_mean,{n}_std");
    }
    s.push('\n');
    for (label, summary) in rows {
        s.push_str(label);
        for n in Metrics::NAMES {
            match summary.get(n) {
                Some(st) => {
                    let _ = write!(s, ",{},{}", st.mean, st.std);
                }
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s
}

/// Runs the four ablation rows with shared folds and seeds.
pub fn run_ablation(cfg: &RunConfig, ds: &CohortDataset, out: Option<&Path>) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for ab in Ablation::ALL {
        let c = RunConfig {
            ablation: ab,
            ..cfg.clone()
        };
        let sub = out.map(|d| d.join(ab.as_str()));
        let r = cross_validate(&c, ds, sub.as_deref())?;
        rows.push(AblationRow {
            row: ab.row(),
            ablation: ab,
            summary: r.summary.clone(),
        });
        runs.push(r);
    }
    let report = AblationReport {
        rows,
        reference: published_reference(),
        runs,
    };
    if let Some(dir) = out {
        let table: Vec<(String, &BTreeMap<String, Stat>)> = report
            .rows
            .iter()
            .map(|r| (format!("{},{}", r.row, r.ablation.as_str()), &r.summary))
            .collect();
        write_file(&dir.join("ablation.csv"), &summary_csv("row,ablation", &table))?;
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        write_file(&dir.join("ablation.json"), &json)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: String,
    pub summary: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: String,
    pub points: Vec<SweepPoint>,
    pub runs: Vec<RunReport>,
}

impl SweepReport {
    fn write(&self, dir: &Path) -> Result<()> {
        let table: Vec<(String, &BTreeMap<String, Stat>)> =
            self.points.iter().map(|p| (p.x.clone(), &p.summary)).collect();
        write_file(&dir.join("sweep.csv"), &summary_csv(&self.parameter, &table))?;
        for n in Metrics::NAMES {
            if self.points.iter().any(|p| !p.summary.contains_key(n)) {
                continue;
            }
            let mut s = String::from("x,mean,std\n");
            for p in &self.points {
                let st = p.summary[n];
                let _ = writeln!(s, "{},{},{}", p.x, st.mean, st.std);
            }
            write_file(&dir.join(format!("plot_{n}.csv")), &s)?;
        }
        let mut json = serde_json::to_string_pretty(self).expect("report serializes");
        json.push('\n');
        write_file(&dir.join("sweep.json"), &json)
    }
}

fn sweep(
    parameter: &str,
    settings: Vec<(String, RunConfig, PathBuf)>,
    ds: &CohortDataset,
    out: Option<&Path>,
) -> Result<SweepReport> {
    for (_, c, _) in &settings {
        c.validate()?;
    }
    let mut points = Vec::new();
    let mut runs = Vec::new();
    for (x, c, sub) in settings {
        let dir = out.map(|d| d.join(&sub));
        let tag = modality_names(&c, ds)?.join("+");
        let r = cross_validate_tagged(&c, ds, dir.as_deref(), &tag)?;
        points.push(SweepPoint {
            x,
            summary: r.summary.clone(),
        });
        runs.push(r);
    }
    let report = SweepReport {
        parameter: parameter.to_string(),
        points,
        runs,
    };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

/// One cross-validation per hyperedge size.
pub fn sweep_k(
    cfg: &RunConfig,
    ds: &CohortDataset,
    values: &[usize],
    out: Option<&Path>,
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(HydaError::config("no k values to sweep"));
    }
    let settings = values
        .iter()
        .map(|&k| {
            (
                k.to_string(),
                RunConfig { k, ..cfg.clone() },
                PathBuf::from(format!("k_{k}")),
            )
        })
        .collect();
    sweep("k", settings, ds, out)
}

/// One cross-validation per modality subset; each report is tagged with its subset.
pub fn sweep_modalities(
    cfg: &RunConfig,
    ds: &CohortDataset,
    subsets: &[Vec<String>],
    out: Option<&Path>,
) -> Result<SweepReport> {
    if subsets.is_empty() {
        return Err(HydaError::config("no modality subsets to sweep"));
    }
    let settings = subsets
        .iter()
        .map(|s| {
            let tag = s.join("+");
            let c = RunConfig {
                modalities: Some(s.clone()),
                ..cfg.clone()
            };
            (tag.clone(), c, PathBuf::from(tag))
        })
        .collect();
    sweep("modalities", settings, ds, out)
}

/// Every `metrics.json` beneath `dir`, in sorted path order.
pub fn collect_reports(dir: &Path) -> Result<Vec<(PathBuf, RunReport)>> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| HydaError::io(&d, e))?;
        for entry in entries {
            let path = entry.map_err(|e| HydaError::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "metrics.json") {
                let text = std::fs::read_to_string(&path).map_err(|e| HydaError::io(&path, e))?;
                let report: RunReport = serde_json::from_str(&text)
                    .map_err(|e| HydaError::format(format!("{}: {e}", path.display())))?;
                found.push((path, report));
            }
        }
    }
    if found.is_empty() {
        return Err(HydaError::format(format!(
            "no metrics.json under {}",
            dir.display()
        )));
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(found)
}

/// Summary table of collected runs: one row per report.
pub fn runs_csv(base: &Path, runs: &[(PathBuf, RunReport)]) -> String {
    let rows: Vec<(String, &BTreeMap<String, Stat>)> = runs
        .iter()
        .map(|(p, r)| {
            let rel = p
                .parent()
                .and_then(|d| d.strip_prefix(base).ok())
                .map_or(String::new(), |d| d.display().to_string());
            let rel = if rel.is_empty() { ".".to_string() } else { rel };
            (format!("{rel},{},{}", r.tag, r.ablation.as_str()), &r.summary)
        })
        .collect();
    summary_csv("run,modalities,ablation", &rows)
}
