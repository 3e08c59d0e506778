use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cohort::{normalize, synth_cohort, SynthSpec};
use crate::config::{Ablation, RunConfig};
use crate::error::{HydaError, Result};
use crate::fusion::KernelAccounting;
use crate::model::{eval_loss, loss_and_grads, Architecture, ModelInput};
use crate::numerics::{finite_diff_check, GradCheckReport, Probe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    /// N=12, two imaging modalities plus tabular, every entry probed.
    Desk,
    /// Generator channel sizes 864/384/128 on a tiny volume, strided probes.
    PaperShapes,
}

impl FromStr for Scale {
    type Err = HydaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper-shapes" => Ok(Scale::PaperShapes),
            other => Err(HydaError::config(format!("unknown gradcheck scale {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutcome {
    pub scale: Scale,
    pub seed: u64,
    pub subjects: usize,
    pub parameters: usize,
    pub report: GradCheckReport,
    pub accounting: KernelAccounting,
}

struct Setup {
    spec: SynthSpec,
    cfg: RunConfig,
    probe: Probe,
}

fn setup(scale: Scale, seed: u64) -> Setup {
    match scale {
        Scale::Desk => Setup {
            spec: SynthSpec {
                subjects: 12,
                imaging: 2,
                tabular: true,
                emb_dim: 64,
                map_dims: [16, 4, 4, 4],
                imbalance: 1.0,
                ..SynthSpec::default()
            },
            cfg: RunConfig {
                k: 4,
                c: 54,
                c_hid: 16,
                c_out: 8,
                c_res: 1,
                batch_size: 12,
                seed,
                ablation: Ablation::FullHyda,
                ..RunConfig::default()
            },
            probe: Probe::All,
        },
        Scale::PaperShapes => Setup {
            spec: SynthSpec {
                subjects: 4,
                imaging: 1,
                tabular: true,
                emb_dim: 8,
                map_dims: [384, 2, 2, 2],
                imbalance: 1.0,
                ..SynthSpec::default()
            },
            cfg: RunConfig {
                k: 2,
                c: 864,
                c_hid: 384,
                c_out: 128,
                c_res: 1,
                batch_size: 4,
                seed,
                ablation: Ablation::FullHyda,
                ..RunConfig::default()
            },
            probe: Probe::Strided(2),
        },
    }
}

/// Central-difference check of every trainable tensor of a full model in
/// evaluation mode.
pub fn run_gradcheck(seed: u64, scale: Scale) -> Result<GradcheckOutcome> {
    let Setup { spec, cfg, probe } = setup(scale, seed);
    let ds = normalize(&synth_cohort(&spec, seed)?)?;
    let arch = Architecture::new(&cfg, &ds)?;
    let mut params = arch.init_params(seed, cfg.fusion_init)?;
    let input = ModelInput::new(&arch, &ds)?;
    let ids: Vec<usize> = (0..ds.len()).collect();
    let alpha = cfg.focal_alpha.expand(ds.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loss_and_grads(
        &arch,
        &mut params,
        &input,
        &ids,
        cfg.focal_gamma,
        &alpha,
        false,
        &mut rng,
    )?;
    let report = finite_diff_check(
        |p| Ok(eval_loss(&arch, p, &input, &ids, cfg.focal_gamma, &alpha)?.total),
        &params,
        1e-6,
        probe,
    )?;
    Ok(GradcheckOutcome {
        scale,
        seed,
        subjects: ds.len(),
        parameters: params.num_scalars(),
        report,
        accounting: KernelAccounting::new(cfg.c, cfg.c_hid, cfg.c_out),
    })
}
