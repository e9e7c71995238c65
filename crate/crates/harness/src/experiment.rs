//! Experiment orchestration: method dispatch, per-epoch artifacts, resume,
//! and the end-of-run summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sparse_at_core::metrics::{
    format_percent, loss_surface_grid, grid_coordinates, robust_generalization_gap, select_checkpoints, FlopModel,
    MetricsRecord, CSV_HEADER,
};
use sparse_at_core::models::{scale_width_to_params, ModelSpec};
use sparse_at_core::sparsity::{global_magnitude_mask, sparsity_of, Allocator};
use sparse_at_core::train::{
    allocate, find_robust_bird, random_sparse_mask, rewind, train_epoch, LrSchedule, OptimizerState, RbOutcome, Regime,
    Splits, Topology, TrainConfig, Trainer,
};
use sparse_at_core::{Model, Real};

use crate::checkpoint::{load_model, load_trainer, save_model, save_trainer};
use crate::config::{Dtype, ExperimentConfig, Method};
use crate::datasets::load_splits;
use crate::error::{HarnessError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const SURFACE_FILE: &str = "surface.tsv";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Continue from `final.ckpt` in `out` when present.
    pub resume: bool,
    /// Stop after this many completed epochs (the run can be resumed).
    pub stop_after: Option<usize>,
}

/// Table-style results of a run. Accuracies are fractions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub method: String,
    pub seed: u64,
    pub epochs: usize,
    pub complete: bool,
    pub target_sparsity: f64,
    pub sparsity: f64,
    pub active_params: usize,
    pub best_epoch: usize,
    pub best_test_ra: f64,
    pub best_test_sa: f64,
    pub best_train_ra: f64,
    pub final_test_ra: f64,
    pub final_test_sa: f64,
    pub final_train_ra: f64,
    /// Best test RA minus final test RA.
    pub diff: f64,
    /// Train RA minus test RA at the best checkpoint.
    pub rgg: f64,
    pub final_rgg: f64,
    pub train_flops: f64,
    /// Per-sample forward FLOPs of the final model.
    pub inference_flops: f64,
    pub dense_inference_flops: f64,
    pub topology_updates: u64,
    pub extra: BTreeMap<String, String>,
}

impl Summary {
    /// `key=value` lines; accuracies as percentages with two decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("method", self.method.clone());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("complete", self.complete.to_string());
        kv("target_sparsity", self.target_sparsity.to_string());
        kv("sparsity", self.sparsity.to_string());
        kv("active_params", self.active_params.to_string());
        kv("best_epoch", self.best_epoch.to_string());
        kv("best_ra", format_percent(self.best_test_ra));
        kv("best_sa", format_percent(self.best_test_sa));
        kv("final_ra", format_percent(self.final_test_ra));
        kv("final_sa", format_percent(self.final_test_sa));
        kv("diff", format_percent(self.diff));
        kv("best_train_ra", format_percent(self.best_train_ra));
        kv("rgg", format_percent(self.rgg));
        kv("final_rgg", format_percent(self.final_rgg));
        kv("train_flops", format!("{:.0}", self.train_flops));
        kv("inference_flops", format!("{:.0}", self.inference_flops));
        kv("dense_inference_flops", format!("{:.0}", self.dense_inference_flops));
        kv("topology_updates", self.topology_updates.to_string());
        for (k, v) in self.extra.iter().filter(|(k, _)| k.as_str() != "method") {
            kv(k, v.clone());
        }
        s
    }
}

/// Parses a summary file into key/value pairs.
pub fn read_summary(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.to_path_buf(), e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

/// Model spec for `cfg` on data with the given sample shape and classes;
/// small-dense runs get the width-scaled spec.
pub fn model_spec(cfg: &ExperimentConfig, input_shape: &[usize], classes: usize) -> Result<ModelSpec> {
    let spec = cfg.model.spec(input_shape, classes)?;
    if cfg.method == Method::SmallDense {
        return Ok(scale_width_to_params(&spec, 1.0 - cfg.sparsity, cfg.small_dense_scope)?);
    }
    Ok(spec)
}

fn topology(cfg: &ExperimentConfig) -> Topology {
    match cfg.method {
        Method::DenseAt | Method::SmallDense => Topology::Dense,
        Method::FlyingBird | Method::FlyingBirdPlus => Topology::Dynamic(cfg.fb.clone()),
        _ => Topology::Static,
    }
}

/// Ticket search under the configured regime. Fast-AT uses a cyclic
/// schedule peaking at 0.2.
pub fn robust_bird_search<T: Real>(cfg: &ExperimentConfig, theta0: &Model<T>, splits: &Splits) -> Result<RbOutcome<T>> {
    let mut tc = cfg.train.clone();
    tc.regime = cfg.rb_regime;
    if matches!(cfg.rb_regime, Regime::FastAt { .. }) {
        tc.schedule = LrSchedule::Cyclic { max: 0.2 };
    }
    let ecfg = tc.epoch_config(cfg.seed, splits.train.len());
    Ok(find_robust_bird(theta0, &splits.train, &cfg.rb, &ecfg)?)
}

/// Dense adversarial pretraining followed by one-shot global magnitude
/// pruning and rewinding. Returns the rewound model and the pretraining
/// cost.
fn omp_ticket<T: Real>(cfg: &ExperimentConfig, theta0: &Model<T>, splits: &Splits) -> Result<(Model<T>, f64)> {
    let tc = TrainConfig {
        epochs: cfg.omp_pretrain_epochs,
        ..cfg.train.clone()
    };
    let ecfg = tc.epoch_config(cfg.seed, splits.train.len());
    let flop_model = FlopModel::new(&theta0.spec)?;
    let mut model = theta0.clone();
    let mut opt = OptimizerState::new(&model);
    let mut iteration = 0;
    let mut flops = 0.0;
    for epoch in 0..tc.epochs {
        flops += train_epoch(&mut model, &mut opt, &splits.train, &ecfg, &flop_model, epoch, &mut iteration, &mut |_, _, _| {
            Ok(0.0)
        })?
        .flops;
    }
    let mask = global_magnitude_mask(model.masks().names, &model.prunable_values(), cfg.sparsity)?;
    Ok((rewind(theta0, &mask)?, flops))
}

/// Builds the initial trainer for the configured method, running any
/// pre-training phase (ticket search, dense pretraining).
pub fn prepare<T: Real>(cfg: &ExperimentConfig, spec: &ModelSpec, splits: &Splits) -> Result<(Trainer<T>, BTreeMap<String, String>)> {
    let mut model: Model<T> = Model::build(spec, cfg.seed)?;
    let calib = splits.train.head(cfg.train.batch_size);
    let mut meta = BTreeMap::new();
    let mut offset = 0.0;
    match cfg.method {
        Method::DenseAt | Method::SmallDense => {}
        Method::RandomPrune => model.set_masks(&random_sparse_mask(&model, cfg.allocator, cfg.sparsity, &calib, cfg.seed)?)?,
        Method::IgqStatic => model.set_masks(&random_sparse_mask(&model, Allocator::Igq, cfg.sparsity, &calib, cfg.seed)?)?,
        Method::Snip => {
            let (_, mask) = allocate(&model, Allocator::Snip, cfg.sparsity, &calib)?;
            model.set_masks(&mask.expect("saliency mask"))?;
        }
        Method::Omp => {
            let (m, flops) = omp_ticket(cfg, &model, splits)?;
            model = m;
            offset = flops;
            meta.insert("omp_pretrain_flops".into(), format!("{flops:.0}"));
        }
        Method::RobustBird => {
            let out = robust_bird_search(cfg, &model, splits)?;
            offset = out.flops;
            meta.insert("rb_converged".into(), out.converged().to_string());
            meta.insert(
                "rb_draw_epoch".into(),
                out.draw_epoch.map_or("none".into(), |e| e.to_string()),
            );
            meta.insert("rb_search_epochs".into(), out.distances.len().to_string());
            meta.insert("rb_search_flops".into(), format!("{:.0}", out.flops));
            model = out.model;
        }
        Method::FlyingBird | Method::FlyingBirdPlus => {
            model.set_masks(&random_sparse_mask(&model, cfg.fb.allocator, cfg.sparsity, &calib, cfg.seed)?)?
        }
    }
    Ok((Trainer::new(model, cfg.train.clone(), topology(cfg), cfg.seed, offset)?, meta))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::Io(path.to_path_buf(), e))
}

/// metrics.csv text for `history`.
pub fn metrics_csv(history: &[MetricsRecord], wall_time: bool) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in history {
        let row = if wall_time {
            r.clone()
        } else {
            MetricsRecord {
                wall_time_s: 0.0,
                ..r.clone()
            }
        };
        s.push_str(&row.to_csv_row());
        s.push('\n');
    }
    s
}

fn build_summary<T: Real>(cfg: &ExperimentConfig, t: &Trainer<T>, init: Option<&MetricsRecord>, meta: &BTreeMap<String, String>) -> Result<Summary> {
    let history: Vec<MetricsRecord> = match init {
        Some(r) => vec![r.clone()],
        None => t.history.clone(),
    };
    let choice = select_checkpoints(&history)?;
    let (best, last) = (&history[choice.best], &history[choice.last]);
    let flop_model = FlopModel::new(&t.model.spec)?;
    let masks = t.model.masks();
    Ok(Summary {
        method: cfg.method.name().into(),
        seed: cfg.seed,
        epochs: t.epoch,
        complete: t.finished(),
        target_sparsity: if cfg.method.is_sparse() { cfg.sparsity } else { 0.0 },
        sparsity: sparsity_of(&masks),
        active_params: masks.active(),
        best_epoch: best.epoch,
        best_test_ra: best.test_ra,
        best_test_sa: best.test_sa,
        best_train_ra: best.train_ra,
        final_test_ra: last.test_ra,
        final_test_sa: last.test_sa,
        final_train_ra: last.train_ra,
        diff: choice.diff,
        rgg: robust_generalization_gap(best.train_ra, best.test_ra),
        final_rgg: robust_generalization_gap(last.train_ra, last.test_ra),
        train_flops: t.cum_flops,
        inference_flops: flop_model.forward(&masks.densities())?,
        dense_inference_flops: flop_model.dense_forward(),
        topology_updates: t.topology_updates,
        extra: meta.clone(),
    })
}

/// Loss surface of `model` on the first `cfg.surface.samples` test samples,
/// as `a<TAB>b<TAB>loss` rows.
pub fn surface_tsv<T: Real>(cfg: &ExperimentConfig, model: &Model<T>, splits: &Splits) -> Result<String> {
    let sample = splits.test.head(cfg.surface.samples);
    let attack = cfg.surface.adversarial.then_some(&cfg.train.eval_attack);
    let grid = loss_surface_grid(model, &sample, cfg.surface.points, cfg.surface.radius, attack, cfg.seed)?;
    let coords = grid_coordinates(cfg.surface.points, cfg.surface.radius);
    let mut s = String::from("a\tb\tloss\n");
    for (i, row) in grid.iter().enumerate() {
        for (j, loss) in row.iter().enumerate() {
            let _ = writeln!(s, "{}\t{}\t{}", coords[i], coords[j], loss);
        }
    }
    Ok(s)
}

fn run_typed<T: Real>(cfg: &ExperimentConfig, opts: &RunOptions, splits: &Splits) -> Result<Summary> {
    let out = &opts.out;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::Io(out.clone(), e))?;
    let spec = model_spec(cfg, &splits.train.item_shape, splits.train.classes)?;
    let final_path = out.join(FINAL_CHECKPOINT);
    let best_path = out.join(BEST_CHECKPOINT);

    let (mut trainer, mut meta) = if opts.resume && final_path.exists() {
        let (mut t, best, meta) = load_trainer::<T>(&final_path, &spec, cfg.train.clone(), topology(cfg))?;
        if let Some(i) = best {
            t.best = Some((i, load_model::<T>(&best_path, &spec)?.0));
        }
        (t, meta)
    } else {
        prepare::<T>(cfg, &spec, splits)?
    };
    meta.insert("method".into(), cfg.method.name().into());

    let metrics_path = out.join(METRICS_FILE);
    write(&metrics_path, &metrics_csv(&trainer.history, cfg.record_wall_time))?;
    while !trainer.finished() {
        if opts.stop_after.is_some_and(|n| trainer.epoch >= n) {
            break;
        }
        trainer.run_epoch(splits)?;
        write(&metrics_path, &metrics_csv(&trainer.history, cfg.record_wall_time))?;
        if let Some((i, m)) = &trainer.best {
            if *i + 1 == trainer.history.len() {
                let mut bm = meta.clone();
                bm.insert("epoch".into(), trainer.history[*i].epoch.to_string());
                save_model(&best_path, m, &bm)?;
            }
        }
        save_trainer(&final_path, &trainer, &meta)?;
    }

    let init = if trainer.history.is_empty() {
        let mut r = trainer.evaluate(splits, 0)?;
        r.lr = cfg.train.schedule.lr(0, 0, 1);
        r.cum_train_flops = trainer.cum_flops;
        let mut bm = meta.clone();
        bm.insert("epoch".into(), "0".into());
        save_model(&best_path, &trainer.model, &bm)?;
        save_trainer(&final_path, &trainer, &meta)?;
        Some(r)
    } else {
        None
    };
    let summary = build_summary(cfg, &trainer, init.as_ref(), &meta)?;
    write(&out.join(SUMMARY_FILE), &summary.to_text())?;
    if cfg.surface.enabled && trainer.finished() {
        write(&out.join(SURFACE_FILE), &surface_tsv(cfg, &trainer.model, splits)?)?;
    }
    Ok(summary)
}

/// Runs an experiment on already-loaded splits.
pub fn run_with_splits(cfg: &ExperimentConfig, opts: &RunOptions, splits: &Splits) -> Result<Summary> {
    match cfg.dtype {
        Dtype::F64 => run_typed::<f64>(cfg, opts, splits),
        Dtype::F32 => run_typed::<f32>(cfg, opts, splits),
    }
}

/// Loads the configured data and runs the experiment, writing metrics.csv,
/// summary.txt, best/final checkpoints and (optionally) surface.tsv into
/// `opts.out`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Summary> {
    let splits = load_splits(&cfg.data)?;
    run_with_splits(cfg, opts, &splits)
}
