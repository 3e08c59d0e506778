use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::metrics::{compute_metrics, Metrics};
use super::optim::AdamW;
use crate::cohort::{CohortDataset, FoldSplit, MinMaxScaler};
use crate::config::RunConfig;
use crate::error::{HydaError, Result};
use crate::model::{eval_loss, loss_and_grads, predict, Architecture, ModelInput};
use crate::numerics::Tensor;

/// Consecutive chunks of `batch` ids. A trailing chunk smaller than `k` is
/// merged into the one before it.
pub fn make_batches(ids: &[usize], batch: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = ids.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < k) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("at least one batch").extend(tail);
    }
    out
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold_index: usize,
    pub seed: u64,
    pub metrics: Metrics,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_ids: Vec<usize>,
    pub val_p_final: Tensor,
    pub checkpoint: Checkpoint,
}

/// Trains one fold and returns the checkpoint with the lowest validation
/// loss together with its validation metrics.
pub fn train_fold(cfg: &RunConfig, ds: &CohortDataset, split: &FoldSplit) -> Result<FoldResult> {
    cfg.validate()?;
    for (what, ids) in [("training", &split.train_ids), ("validation", &split.val_ids)] {
        if ids.len() < cfg.k {
            return Err(HydaError::config(format!(
                "{what} split of fold {} has {} subjects, fewer than k = {}",
                split.fold_index,
                ids.len(),
                cfg.k
            )));
        }
    }
    let seed = cfg.seed + split.fold_index as u64;
    let scaler = MinMaxScaler::fit(ds, &split.train_ids)?;
    let data = scaler.apply(ds)?;
    let arch = Architecture::new(cfg, &data)?;
    let input = ModelInput::new(&arch, &data)?;
    let mut params = arch.init_params(seed, cfg.fusion_init)?;
    let alpha = cfg.focal_alpha.expand(data.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(cfg.weight_decay_hg);
    let patience = cfg.schedule.as_ref().map_or(0, |s| s.early_stop_patience);

    let mut best: Option<(f64, usize, crate::numerics::ModelParams, AdamW)> = None;
    let mut since_best = 0;
    let (mut train_curve, mut val_curve) = (Vec::new(), Vec::new());
    let mut order = split.train_ids.clone();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.schedule.as_ref().map_or(1.0, |s| s.lr_factor(epoch));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in make_batches(&order, cfg.batch_size, cfg.k) {
            let parts = loss_and_grads(
                &arch,
                &mut params,
                &input,
                &batch,
                cfg.focal_gamma,
                &alpha,
                true,
                &mut rng,
            )?;
            sum += parts.total * batch.len() as f64;
            opt.step(&mut params, lr)?;
        }
        train_curve.push(sum / order.len() as f64);
        let vl = eval_loss(&arch, &params, &input, &split.val_ids, cfg.focal_gamma, &alpha)?.total;
        if !vl.is_finite() {
            return Err(HydaError::Numeric(format!(
                "validation loss {vl} at epoch {}",
                epoch + 1
            )));
        }
        val_curve.push(vl);
        if best.as_ref().is_none_or(|b| vl < b.0) {
            best = Some((vl, epoch + 1, params.clone(), opt.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if patience > 0 && since_best >= patience {
                break;
            }
        }
    }
    let (_, best_epoch, best_params, best_opt) = best.expect("at least one epoch");
    let pred = predict(&arch, &best_params, &input, &split.val_ids)?;
    let labels: Vec<usize> = split.val_ids.iter().map(|&i| data.subjects[i].label).collect();
    let metrics = compute_metrics(&pred.p_final, &labels, ds.positive_class())?;
    let mut best_params = best_params;
    best_params.zero_grads();
    Ok(FoldResult {
        fold_index: split.fold_index,
        seed,
        metrics,
        best_epoch,
        epochs_run: train_curve.len(),
        train_loss: train_curve,
        val_loss: val_curve,
        val_ids: split.val_ids.clone(),
        val_p_final: pred.p_final,
        checkpoint: Checkpoint {
            config: cfg.clone(),
            classes: ds.num_classes,
            modalities: ds.modalities.clone(),
            fingerprint: cfg.fingerprint(ds),
            epoch: best_epoch,
            scaler,
            params: best_params,
            optimizer: best_opt,
        },
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub metrics: Metrics,
    pub ids: Vec<usize>,
    pub p_final: Tensor,
}

/// Dropout-free prediction over `ids` with one hypergraph spanning them.
pub fn evaluate(ckpt: &Checkpoint, ds: &CohortDataset, ids: &[usize]) -> Result<EvalOutput> {
    ckpt.check_compatible(ds)?;
    let data = ckpt.scaler.apply(ds)?;
    let arch = Architecture::new(&ckpt.config, &data)?;
    if ids.len() < arch.k {
        return Err(HydaError::config(format!(
            "{} subjects to evaluate, fewer than k = {}",
            ids.len(),
            arch.k
        )));
    }
    let pred = predict(&arch, &ckpt.params, &ModelInput::new(&arch, &data)?, ids)?;
    let labels: Vec<usize> = ids.iter().map(|&i| data.subjects[i].label).collect();
    let metrics = compute_metrics(&pred.p_final, &labels, ds.positive_class())?;
    Ok(EvalOutput {
        metrics,
        ids: ids.to_vec(),
        p_final: pred.p_final,
    })
}
