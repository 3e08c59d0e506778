use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use hyda::cohort::{kfold_split, load_cohort, save_cohort, synth_cohort, CohortDataset, SynthSpec};
use hyda::config::{parse_subsets, RunConfig};
use hyda::train::{
    collect_reports, cross_validate, evaluate, load_checkpoint, run_ablation, run_gradcheck, runs_csv,
    sweep_k, sweep_modalities, train_fold, write_fold, FoldRow, Scale,
};
use hyda::{HydaError, Result};

/// Gradient check tolerance on the largest relative error.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "hyda", version, about = "Hypergraph dynamic adapter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Synth(SynthArgs),
    /// Train a single fold and save its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Cross-validate one configuration.
    Cv(RunArgs),
    /// Run the four ablation rows on shared folds.
    Ablation(RunArgs),
    /// Cross-validate once per hyperedge size.
    SweepK {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Cross-validate once per modality subset, e.g. `mri;mri+pet;mri+pet+tabular`.
    SweepModalities {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        subsets: String,
    },
    /// Evaluate a checkpoint on the subjects listed in an ids file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ids: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
        scale: ScaleArg,
    },
    /// Summarize every `metrics.json` beneath a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
    },
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    subjects: usize,
    #[arg(long, default_value_t = 2)]
    imaging: usize,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    tabular: bool,
    #[arg(long, default_value_t = 128)]
    emb_dim: usize,
    #[arg(long, default_value = "16x4x4x4", value_parser = parse_map_dims)]
    map_dims: [usize; 4],
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 3.0)]
    imbalance: f64,
    #[arg(long, default_value_t = 0.5)]
    complementarity: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    PaperShapes,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn parse_map_dims(s: &str) -> std::result::Result<[usize; 4], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("{s:?}: {e}"))?;
    parts.try_into().map_err(|_| format!("{s:?}: expected CxDxHxW"))
}

fn load(data: &Path, config: &Path) -> Result<(CohortDataset, RunConfig)> {
    let cfg = RunConfig::load(config)?;
    Ok((load_cohort(data)?, cfg))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HydaError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| HydaError::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Subject ids, one per line; blank lines and `#` comments are skipped.
fn read_ids(path: &Path, ds: &CohortDataset) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| HydaError::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|id| {
            ds.index_of(id)
                .ok_or_else(|| HydaError::format(format!("{}: unknown subject id {id}", path.display())))
        })
        .collect()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            let spec = SynthSpec {
                subjects: a.subjects,
                imaging: a.imaging,
                tabular: a.tabular,
                emb_dim: a.emb_dim,
                map_dims: a.map_dims,
                classes: a.classes,
                imbalance: a.imbalance,
                complementarity: a.complementarity,
                noise: a.noise,
            };
            let ds = synth_cohort(&spec, a.seed)?;
            save_cohort(&ds, &a.out)?;
            println!("wrote {} subjects to {}", ds.len(), a.out.display());
        }
        Command::Train {
            data,
            config,
            out,
            fold,
        } => {
            let (ds, cfg) = load(&data, &config)?;
            cfg.validate()?;
            let splits = kfold_split(&ds.labels(), cfg.folds, cfg.seed)?;
            let split = splits.get(fold).ok_or_else(|| {
                HydaError::config(format!("fold {fold} out of range for {} folds", cfg.folds))
            })?;
            let r = train_fold(&cfg, &ds, split)?;
            write_fold(&out, &ds, &r)?;
            let dir = out.join(format!("fold_{fold}"));
            write(&dir.join("fold.json"), &to_json(&FoldRow::from(&r)))?;
            println!("{}", to_json(&r.metrics).trim_end());
        }
        Command::Cv(a) => {
            let (ds, cfg) = load(&a.data, &a.config)?;
            let r = cross_validate(&cfg, &ds, Some(&a.out))?;
            print!("{}", r.to_csv());
        }
        Command::Ablation(a) => {
            let (ds, cfg) = load(&a.data, &a.config)?;
            run_ablation(&cfg, &ds, Some(&a.out))?;
            let table = a.out.join("ablation.csv");
            print!(
                "{}",
                std::fs::read_to_string(&table).map_err(|e| HydaError::io(&table, e))?
            );
        }
        Command::SweepK { run, values } => {
            let (ds, cfg) = load(&run.data, &run.config)?;
            sweep_k(&cfg, &ds, &values, Some(&run.out))?;
            let table = run.out.join("sweep.csv");
            print!(
                "{}",
                std::fs::read_to_string(&table).map_err(|e| HydaError::io(&table, e))?
            );
        }
        Command::SweepModalities { run, subsets } => {
            let subsets = parse_subsets(&subsets)?;
            let (ds, cfg) = load(&run.data, &run.config)?;
            sweep_modalities(&cfg, &ds, &subsets, Some(&run.out))?;
            let table = run.out.join("sweep.csv");
            print!(
                "{}",
                std::fs::read_to_string(&table).map_err(|e| HydaError::io(&table, e))?
            );
        }
        Command::Eval {
            checkpoint,
            data,
            ids,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = load_cohort(&data)?;
            let ids = read_ids(&ids, &ds)?;
            let r = evaluate(&ckpt, &ds, &ids)?;
            let mut pred = String::from("subject_id,label");
            for c in 0..r.p_final.shape()[1] {
                let _ = write!(pred, ",p{c}");
            }
            pred.push('\n');
            for (row, &i) in r.ids.iter().enumerate() {
                let s = &ds.subjects[i];
                let probs: Vec<String> = r.p_final.row(row).iter().map(f64::to_string).collect();
                let _ = writeln!(pred, "{},{},{}", s.subject_id, s.label, probs.join(","));
            }
            write(&out.join("predictions.csv"), &pred)?;
            write(&out.join("eval.json"), &to_json(&r.metrics))?;
            println!("{}", to_json(&r.metrics).trim_end());
        }
        Command::Gradcheck { seed, scale } => {
            let scale = match scale {
                ScaleArg::Desk => Scale::Desk,
                ScaleArg::PaperShapes => Scale::PaperShapes,
            };
            let start = Instant::now();
            let o = run_gradcheck(seed, scale)?;
            let secs = start.elapsed().as_secs_f64();
            let worst = o
                .report
                .per_param
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                .map_or("-", |p| p.name.as_str());
            println!("scale {:?}, seed {}, subjects {}", o.scale, o.seed, o.subjects);
            println!(
                "parameters {}, entries checked {}",
                o.parameters, o.report.checked
            );
            println!(
                "max relative error {:.3e} (worst tensor {worst})",
                o.report.max_rel_error
            );
            println!("generator weights {}", o.accounting.weights);
            println!("note: {}", o.accounting.note);
            println!("runtime {secs:.1} s");
            if o.report.max_rel_error.is_nan() || o.report.max_rel_error >= GRADCHECK_TOL {
                return Err(HydaError::Numeric(format!(
                    "max relative error {:.3e} exceeds {GRADCHECK_TOL:e}",
                    o.report.max_rel_error
                )));
            }
        }
        Command::Report { runs, format } => {
            let found = collect_reports(&runs)?;
            match format {
                Format::Csv => print!("{}", runs_csv(&runs, &found)),
                Format::Json => {
                    #[derive(serde::Serialize)]
                    struct Entry<'a> {
                        path: String,
                        report: &'a hyda::train::RunReport,
                    }
                    let entries: Vec<Entry> = found
                        .iter()
                        .map(|(p, r)| Entry {
                            path: p.strip_prefix(&runs).unwrap_or(p).display().to_string(),
                            report: r,
                        })
                        .collect();
                    print!("{}", to_json(&entries));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
