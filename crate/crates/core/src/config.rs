//! Run configuration parsed from TOML.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{CohortDataset, ModalityDescriptor};
use crate::error::{HydaError, Result};
use crate::heads::FocalAlpha;
use crate::hypergraph::Backend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    DiscOnly,
    HgOnly,
    AvgHeads,
    #[default]
    FullHyda,
}

impl FromStr for Ablation {
    type Err = HydaError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| HydaError::config(format!("unknown ablation {s:?}")))
    }
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::DiscOnly,
        Ablation::HgOnly,
        Ablation::AvgHeads,
        Ablation::FullHyda,
    ];

    pub fn uses_hypergraph(self) -> bool {
        !matches!(self, Ablation::DiscOnly)
    }

    pub fn uses_disc(self) -> bool {
        !matches!(self, Ablation::HgOnly)
    }

    pub fn uses_fusion(self) -> bool {
        matches!(self, Ablation::FullHyda)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::DiscOnly => "disc_only",
            Ablation::HgOnly => "hg_only",
            Ablation::AvgHeads => "avg_heads",
            Ablation::FullHyda => "full_hyda",
        }
    }

    /// Row number in the four-row ablation table.
    pub fn row(self) -> usize {
        match self {
            Ablation::DiscOnly => 1,
            Ablation::HgOnly => 2,
            Ablation::AvgHeads => 3,
            Ablation::FullHyda => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionInit {
    #[default]
    Random,
    /// All generator and fusion weights zero, so the fusion path adds nothing.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub warmup_epochs: usize,
    pub decay_epoch: usize,
    pub decay_gamma: f64,
    pub early_stop_patience: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 3,
            decay_epoch: 6,
            decay_gamma: 0.5,
            early_stop_patience: 7,
        }
    }
}

impl Schedule {
    /// Multiplier on the base rate for a 0-based epoch: linear warmup over
    /// `warmup_epochs`, then `decay_gamma` applied once per `decay_epoch`
    /// epochs elapsed.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        if self.decay_epoch == 0 {
            return 1.0;
        }
        self.decay_gamma.powi((epoch / self.decay_epoch) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub k: usize,
    #[serde(alias = "C")]
    pub c: usize,
    #[serde(alias = "C_hid")]
    pub c_hid: usize,
    #[serde(alias = "C_out")]
    pub c_out: usize,
    #[serde(alias = "C_res")]
    pub c_res: usize,
    pub lr: f64,
    pub weight_decay_hg: f64,
    pub dropout_p: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub focal_gamma: f64,
    pub focal_alpha: FocalAlpha,
    pub seed: u64,
    /// Modality names to use; absent means every modality in the cohort.
    pub modalities: Option<Vec<String>>,
    pub backend: Backend,
    pub ablation: Ablation,
    pub schedule: Option<Schedule>,
    pub fusion_init: FusionInit,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 20,
            c: 54,
            c_hid: 16,
            c_out: 8,
            c_res: 2,
            lr: 1e-3,
            weight_decay_hg: 0.01,
            dropout_p: 0.5,
            batch_size: 30,
            epochs: 100,
            folds: 5,
            focal_gamma: 2.0,
            focal_alpha: FocalAlpha::default(),
            seed: 0,
            modalities: None,
            backend: Backend::default(),
            ablation: Ablation::default(),
            schedule: None,
            fusion_init: FusionInit::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HydaError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HydaError::io(path, e))?;
        toml::from_str(&text).map_err(|e| HydaError::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HydaError::config(m));
        if self.k == 0 || self.k > self.batch_size {
            return bad(format!(
                "k = {} must lie in [1, batch_size = {}]",
                self.k, self.batch_size
            ));
        }
        if self.ablation.uses_fusion() && !self.c.is_multiple_of(27) {
            return bad(format!("C = {} must be divisible by 27 for full_hyda", self.c));
        }
        if [self.c, self.c_hid, self.c_out, self.c_res].contains(&0) {
            return bad("channel dimensions must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if !(self.weight_decay_hg >= 0.0 && self.weight_decay_hg.is_finite()) {
            return bad(format!("weight_decay_hg = {} must be >= 0", self.weight_decay_hg));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p = {} outside [0, 1)", self.dropout_p));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.folds < 2 {
            return bad(format!("folds = {} must be at least 2", self.folds));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return bad(format!("focal_gamma = {} must be >= 0", self.focal_gamma));
        }
        if let Some(s) = &self.schedule {
            if !(s.decay_gamma > 0.0 && s.decay_gamma <= 1.0) {
                return bad(format!("decay_gamma = {} outside (0, 1]", s.decay_gamma));
            }
        }
        if let Some(m) = &self.modalities {
            if m.is_empty() {
                return bad("modalities selector is empty".into());
            }
        }
        Ok(())
    }

    /// Descriptors of the selected modalities in cohort order.
    pub fn selected_modalities<'a>(
        &self,
        available: &'a [ModalityDescriptor],
    ) -> Result<Vec<&'a ModalityDescriptor>> {
        match &self.modalities {
            None => Ok(available.iter().collect()),
            Some(names) => {
                for n in names {
                    if !available.iter().any(|m| &m.name == n) {
                        return Err(HydaError::config(format!("unknown modality {n}")));
                    }
                }
                Ok(available.iter().filter(|m| names.contains(&m.name)).collect())
            }
        }
    }

    /// Hex sha256 over the canonical config and the cohort shapes.
    pub fn fingerprint(&self, ds: &CohortDataset) -> String {
        self.fingerprint_shapes(ds.num_classes, &ds.modalities)
    }

    pub fn fingerprint_shapes(&self, classes: usize, modalities: &[ModalityDescriptor]) -> String {
        #[derive(Serialize)]
        struct Canon<'a> {
            config: &'a RunConfig,
            classes: usize,
            modalities: &'a [ModalityDescriptor],
        }
        let canon = Canon {
            config: self,
            classes,
            modalities,
        };
        let bytes = serde_json::to_vec(&canon).expect("canonical form serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Parses `mri;mri+pet;mri+pet+tabular` into modality name lists.
pub fn parse_subsets(spec: &str) -> Result<Vec<Vec<String>>> {
    let out: Vec<Vec<String>> = spec
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.split('+').map(|n| n.trim().to_string()).collect())
        .collect();
    if out.is_empty() || out.iter().flatten().any(String::is_empty) {
        return Err(HydaError::config(format!("malformed modality subsets {spec:?}")));
    }
    Ok(out)
}
