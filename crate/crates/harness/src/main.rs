//! `sparse-at` command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sparse_at::checkpoint::{load_model, save_model};
use sparse_at::config::{Dtype, ExperimentConfig, Method};
use sparse_at::datasets::load_splits;
use sparse_at::experiment::{model_spec, robust_bird_search, run_with_splits, surface_tsv, RunOptions};
use sparse_at_core::metrics::{evaluate_accuracy, format_percent, transfer_eval, FlopModel};
use sparse_at_core::rng::{stream, Purpose};
use sparse_at_core::train::Splits;
use sparse_at_core::{Model, Real};

#[derive(Parser)]
#[command(name = "sparse-at", version, about = "Sparse adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Ok(ExperimentConfig::load(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one method end to end and write metrics, checkpoints and a summary.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/out")]
        out: PathBuf,
        /// Continue from the final checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Search for a sparse ticket from the initialization and save it rewound.
    FindRb {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/ticket.ckpt")]
        out: PathBuf,
    },
    /// Clean and adversarial test accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Accuracy of `target` on adversarial examples crafted against `source`.
    TransferEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Config override applied to the source model only; repeatable.
        #[arg(long = "source-set", value_name = "KEY=VALUE")]
        source_overrides: Vec<String>,
    },
    /// Loss values over a 2-D slice of weight space around a checkpoint.
    LossSurface {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "surface.tsv")]
        out: PathBuf,
    },
    /// FLOPs of the configured model, optionally at a checkpoint's densities.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load<T: Real>(cfg: &ExperimentConfig, splits: &Splits, path: &Path) -> anyhow::Result<Model<T>> {
    let spec = model_spec(cfg, &splits.train.item_shape, splits.train.classes)?;
    let (model, _) = load_model::<T>(path, &spec).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

fn eval<T: Real>(cfg: &ExperimentConfig, checkpoint: &Path) -> anyhow::Result<()> {
    let splits = load_splits(&cfg.data)?;
    let model = load::<T>(cfg, &splits, checkpoint)?;
    let b = cfg.train.eval_batch_size;
    let clean = evaluate_accuracy(&model, &splits.test, None, b, &mut stream(cfg.seed, 0, Purpose::EvalTest))?;
    let robust = evaluate_accuracy(
        &model,
        &splits.test,
        Some(&cfg.train.eval_attack),
        b,
        &mut stream(cfg.seed, 0, Purpose::EvalTest),
    )?;
    println!("samples={}", clean.samples);
    println!("test_sa={}", format_percent(clean.accuracy));
    println!("test_ra={}", format_percent(robust.accuracy));
    println!("robust_loss={}", robust.loss);
    Ok(())
}

fn transfer<T: Real>(cfg: &ExperimentConfig, source_cfg: &ExperimentConfig, source: &Path, target: &Path) -> anyhow::Result<()> {
    let splits = load_splits(&cfg.data)?;
    let src = load::<T>(source_cfg, &splits, source)?;
    let tgt = load::<T>(cfg, &splits, target)?;
    let r = transfer_eval(
        &src,
        &tgt,
        &splits.test,
        Some(&cfg.train.eval_attack),
        cfg.train.eval_batch_size,
        &mut stream(cfg.seed, 0, Purpose::EvalTest),
    )?;
    println!("samples={}", r.samples);
    println!("transfer_ra={}", format_percent(r.accuracy));
    Ok(())
}

fn surface<T: Real>(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> anyhow::Result<()> {
    let splits = load_splits(&cfg.data)?;
    let model = load::<T>(cfg, &splits, checkpoint)?;
    std::fs::write(out, surface_tsv(cfg, &model, &splits)?).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn find_rb<T: Real>(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let splits = load_splits(&cfg.data)?;
    let spec = model_spec(cfg, &splits.train.item_shape, splits.train.classes)?;
    let theta0: Model<T> = Model::build(&spec, cfg.seed)?;
    let found = robust_bird_search(cfg, &theta0, &splits)?;
    let draw = found.draw_epoch.map_or("none".to_string(), |e| e.to_string());
    let meta = [
        ("rb_draw_epoch".to_string(), draw.clone()),
        ("rb_converged".to_string(), found.converged().to_string()),
    ]
    .into_iter()
    .collect();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_model(out, &found.model, &meta)?;
    println!("draw_epoch={draw}");
    println!("converged={}", found.converged());
    println!("search_flops={:.0}", found.flops);
    for (i, d) in found.distances.iter().enumerate() {
        println!("distance[{}]={d}", i + 1);
    }
    Ok(())
}

fn flops(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let splits = load_splits(&cfg.data)?;
    let spec = model_spec(cfg, &splits.train.item_shape, splits.train.classes)?;
    let fm = FlopModel::new(&spec)?;
    let densities = match checkpoint {
        Some(p) => load_model::<f64>(p, &spec)?.0.masks().densities(),
        None => vec![1.0; fm.prunable.len()],
    };
    let steps = cfg.train.regime.attack_steps();
    println!("dense_inference_flops={:.0}", fm.dense_forward());
    println!("inference_flops={:.0}", fm.forward(&densities)?);
    println!(
        "iteration_flops={:.0}",
        fm.iteration(&densities, cfg.train.batch_size, steps)?
    );
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            common,
            out,
            resume,
            stop_after,
        } => {
            let cfg = common.load()?;
            let splits = load_splits(&cfg.data)?;
            let opts = RunOptions { out, resume, stop_after };
            let summary = run_with_splits(&cfg, &opts, &splits)?;
            print!("{}", summary.to_text());
        }
        Command::FindRb { common, out } => {
            let cfg = common.load()?;
            if cfg.method != Method::RobustBird {
                eprintln!("note: searching with method {} settings", cfg.method);
            }
            match cfg.dtype {
                Dtype::F64 => find_rb::<f64>(&cfg, &out)?,
                Dtype::F32 => find_rb::<f32>(&cfg, &out)?,
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            match cfg.dtype {
                Dtype::F64 => eval::<f64>(&cfg, &checkpoint)?,
                Dtype::F32 => eval::<f32>(&cfg, &checkpoint)?,
            }
        }
        Command::TransferEval {
            common,
            source,
            target,
            source_overrides,
        } => {
            let cfg = common.load()?;
            let mut src_common = common.clone();
            src_common.overrides.extend(source_overrides);
            let source_cfg = src_common.load()?;
            if source_cfg.dtype != cfg.dtype {
                bail!("source and target must share a dtype");
            }
            match cfg.dtype {
                Dtype::F64 => transfer::<f64>(&cfg, &source_cfg, &source, &target)?,
                Dtype::F32 => transfer::<f32>(&cfg, &source_cfg, &source, &target)?,
            }
        }
        Command::LossSurface { common, checkpoint, out } => {
            let cfg = common.load()?;
            match cfg.dtype {
                Dtype::F64 => surface::<f64>(&cfg, &checkpoint, &out)?,
                Dtype::F32 => surface::<f32>(&cfg, &checkpoint, &out)?,
            }
        }
        Command::Flops { common, checkpoint } => {
            let cfg = common.load()?;
            flops(&cfg, checkpoint.as_deref())?;
        }
    }
    Ok(())
}
