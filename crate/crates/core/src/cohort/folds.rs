use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HydaError, Result};

/// One train/validation partition; ids are subject indices, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

/// Stratified, seeded k-fold partition.
///
/// Members of each class are shuffled, the shuffled classes are laid end to
/// end and position `i` goes to validation fold `i % folds`. This keeps both
/// per-class and total fold sizes within one subject of each other.
pub fn kfold_split(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(HydaError::config(format!("need at least 2 folds, got {folds}")));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < folds {
            return Err(HydaError::config(format!(
                "class {c} has {} subjects, fewer than {folds} folds",
                members.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val: Vec<Vec<usize>> = vec![Vec::new(); folds];
    let mut pos = 0;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            val[pos % folds].push(i);
            pos += 1;
        }
    }
    Ok(val
        .into_iter()
        .enumerate()
        .map(|(f, mut v)| {
            v.sort_unstable();
            let mut in_val = vec![false; labels.len()];
            v.iter().for_each(|&i| in_val[i] = true);
            FoldSplit {
                fold_index: f,
                train_ids: (0..labels.len()).filter(|&i| !in_val[i]).collect(),
                val_ids: v,
            }
        })
        .collect())
}
