//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines always
//! print. The CIFAR-10 desk-scale run is skipped unless
//! `SPARSE_AT_CIFAR10=<dir of cifar-10-batches-bin>` is set or
//! `--include-ignored` is passed; with the flag and no data it fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_at::config::ExperimentConfig;
use sparse_at::datasets::load_splits;
use sparse_at::experiment::{run_with_splits, RunOptions, Summary, METRICS_FILE};
use sparse_at_core::attacks::{pgd_attack, AttackConfig};
use sparse_at_core::autodiff::BackwardOptions;
use sparse_at_core::data::Dataset;
use sparse_at_core::metrics::{evaluate_accuracy, FlopModel};
use sparse_at_core::models::{Fan, LayerKind, ModelSpec};
use sparse_at_core::sparsity::{
    allocate_erk, allocate_igq, allocate_snip, allocate_uniform, grow_largest_gradient, prune_lowest_magnitude,
    sample_random_mask, sparsity_of, AllocationPlan, LayerMask, SparsityMask,
};
use sparse_at_core::train::{
    draw_epoch, find_robust_bird, rewind, train_epoch, DrawDetector, FbConfig, LrSchedule, OptimizerState, RbConfig,
    Regime, Splits, Topology, TrainConfig, Trainer,
};
use sparse_at_core::{Mode, Model, Real, Tensor};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took <= limit, || format!("took {took:.1?}, limit {limit:?}"))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

// ---------------------------------------------------------------- gradients

/// Mean softmax cross-entropy computed directly from logits.
fn reference_loss(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let c = logits.item_len();
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

fn train_mode_loss(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut m = model.clone();
    let tape = m.forward(x, Mode::Train).unwrap();
    reference_loss(tape.logits(), labels)
}

/// Worst relative error over every parameter and input coordinate. Each
/// coordinate is compared at two step sizes and the closer estimate is
/// kept, so a ReLU kink inside one step does not count as a mismatch.
fn max_grad_error(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> (f64, String) {
    const STEPS: [f64; 2] = [1e-5, 1e-6];
    const FLOOR: f64 = 1e-6;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);

    let mut analytic = model.clone();
    let mut tape = analytic.forward(x, Mode::Train).unwrap();
    tape.cross_entropy(labels).unwrap();
    let dx = tape
        .backward(&mut analytic, BackwardOptions { input_grad: true, dense: false })
        .unwrap()
        .unwrap();

    let mut worst = (0.0, String::new());
    let mut probe = model.clone();
    for p in 0..model.params.len() {
        for i in 0..model.params[p].value.len() {
            let orig = probe.params[p].value.data()[i];
            let mut best = f64::INFINITY;
            for h in STEPS {
                probe.params[p].value.data_mut()[i] = orig + h;
                let up = train_mode_loss(&probe, x, labels);
                probe.params[p].value.data_mut()[i] = orig - h;
                let down = train_mode_loss(&probe, x, labels);
                best = best.min(rel(analytic.params[p].grad.data()[i], (up - down) / (2.0 * h)));
            }
            probe.params[p].value.data_mut()[i] = orig;
            if best > worst.0 {
                worst = (best, format!("{}[{i}]", model.params[p].name));
            }
        }
    }
    let mut xin = x.clone();
    for i in 0..x.len() {
        let orig = xin.data()[i];
        let mut best = f64::INFINITY;
        for h in STEPS {
            xin.data_mut()[i] = orig + h;
            let up = train_mode_loss(model, &xin, labels);
            xin.data_mut()[i] = orig - h;
            let down = train_mode_loss(model, &xin, labels);
            best = best.min(rel(dx.data()[i], (up - down) / (2.0 * h)));
        }
        xin.data_mut()[i] = orig;
        if best > worst.0 {
            worst = (best, format!("input[{i}]"));
        }
    }
    worst
}

fn gradient_cases() -> Vec<(&'static str, ModelSpec)> {
    let head = |c: usize, hw: usize| vec![LayerKind::Flatten, LayerKind::linear(c * hw * hw, 3, true)];
    let with_head = |mut body: Vec<LayerKind>, c: usize, hw: usize| {
        body.extend(head(c, hw));
        body
    };
    vec![
        ("linear", ModelSpec::new(&[5], 3, vec![LayerKind::linear(5, 3, true)])),
        (
            "linear-nobias",
            ModelSpec::new(&[4], 3, vec![LayerKind::linear(4, 3, false)]),
        ),
        (
            "conv2d",
            ModelSpec::new(&[2, 5, 5], 3, with_head(vec![LayerKind::conv(2, 3, 3, 1, 1)], 3, 5)),
        ),
        (
            "conv2d-stride-bias",
            ModelSpec::new(
                &[2, 5, 5],
                3,
                with_head(
                    vec![LayerKind::Conv2d {
                        in_ch: 2,
                        out_ch: 2,
                        kernel: 3,
                        stride: 2,
                        padding: 0,
                        bias: true,
                        prunable: true,
                    }],
                    2,
                    2,
                ),
            ),
        ),
        (
            "batchnorm",
            ModelSpec::new(
                &[2, 3, 3],
                3,
                with_head(vec![LayerKind::conv(2, 2, 1, 1, 0), LayerKind::BatchNorm { channels: 2 }], 2, 3),
            ),
        ),
        (
            "relu",
            ModelSpec::new(&[6], 3, vec![LayerKind::linear(6, 5, true), LayerKind::Relu, LayerKind::linear(5, 3, true)]),
        ),
        (
            "avgpool",
            ModelSpec::new(
                &[2, 4, 4],
                3,
                with_head(vec![LayerKind::conv(2, 2, 3, 1, 1), LayerKind::AvgPool { kernel: 2 }], 2, 2),
            ),
        ),
        (
            "global-avgpool",
            ModelSpec::new(
                &[2, 4, 4],
                3,
                vec![LayerKind::conv(2, 4, 3, 1, 1), LayerKind::GlobalAvgPool, LayerKind::linear(4, 3, true)],
            ),
        ),
        (
            "flatten",
            ModelSpec::new(&[2, 2, 2], 3, vec![LayerKind::Flatten, LayerKind::linear(8, 3, true)]),
        ),
        (
            "basic-block-identity",
            ModelSpec::new(
                &[2, 4, 4],
                3,
                vec![
                    LayerKind::BasicBlock { in_ch: 2, out_ch: 2, stride: 1 },
                    LayerKind::GlobalAvgPool,
                    LayerKind::linear(2, 3, true),
                ],
            ),
        ),
        (
            "basic-block-projection",
            ModelSpec::new(
                &[2, 4, 4],
                3,
                vec![
                    LayerKind::BasicBlock { in_ch: 2, out_ch: 3, stride: 2 },
                    LayerKind::GlobalAvgPool,
                    LayerKind::linear(3, 3, true),
                ],
            ),
        ),
        (
            "composite-3-layer",
            ModelSpec::new(
                &[2, 4, 4],
                3,
                vec![
                    LayerKind::conv(2, 3, 3, 1, 1),
                    LayerKind::BatchNorm { channels: 3 },
                    LayerKind::Relu,
                    LayerKind::conv(3, 3, 3, 1, 1),
                    LayerKind::Relu,
                    LayerKind::AvgPool { kernel: 2 },
                    LayerKind::Flatten,
                    LayerKind::linear(12, 3, true),
                ],
            ),
        ),
    ]
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut worst = (0.0, String::new());
    let cases = gradient_cases();
    for (name, spec) in &cases {
        for seed in 0..20u64 {
            let model = Model::<f64>::build(spec, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let batch = 3;
            let x = random_tensor(&mut rng, &[&[batch][..], &spec.input_shape].concat());
            let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..spec.classes)).collect();
            let (e, at) = max_grad_error(&model, &x, &labels);
            if e > worst.0 {
                worst = (e, format!("{name} seed {seed} {at}"));
            }
        }
    }
    ensure(worst.0 < 1e-4, || format!("max relative error {:.3e} at {}", worst.0, worst.1))?;
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "{} layer cases x 20 seeds, max relative error {:.2e}",
        cases.len(),
        worst.0
    ))
}

// ----------------------------------------------------------------- attacks

fn toy_classifier<T: Real>() -> Model<T> {
    Model::build(&ModelSpec::mlp(6, &[8], 3), 7).unwrap()
}

fn check_delta<T: Real>(x: &Tensor<T>, d: &Tensor<T>, eps: f64) -> Result<(), String> {
    let e = T::lit(eps);
    for (&xi, &di) in x.data().iter().zip(d.data()) {
        ensure(di.abs() <= e, || format!("|delta| {} > eps {}", di.as_f64(), eps))?;
        let adv = xi + di;
        ensure(adv >= T::zero() && adv <= T::one(), || format!("x+delta = {} outside [0,1]", adv.as_f64()))?;
    }
    Ok(())
}

fn attack_batch<T: Real>(model: &Model<T>, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.gen_range(1..=4);
    let data: Vec<f64> = (0..n * 6)
        .map(|_| match rng.gen_range(0..6) {
            0 => 0.0,
            1 => 1.0,
            2 => rng.gen_range(0.0..1e-3),
            3 => 1.0 - rng.gen_range(0.0..1e-3),
            _ => rng.gen(),
        })
        .collect();
    let x = Tensor::<T>::from_f64(&[n, 6], &data).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let eps = match rng.gen_range(0..5) {
        0 => 0.0,
        1 => 1.0,
        2 => 8.0 / 255.0,
        _ => rng.gen_range(1e-4..0.5),
    };
    let cfg = AttackConfig {
        eps,
        alpha: eps * rng.gen_range(0.1..3.0),
        steps: rng.gen_range(1..=3),
        random_start: rng.gen_bool(0.8),
    };
    let delta = pgd_attack(model, &x, &labels, &cfg, rng).map_err(|e| e.to_string())?;
    check_delta(&x, &delta, eps)
}

fn attack_invariants() -> Check {
    let start = Instant::now();
    let m64 = toy_classifier::<f64>();
    let m32 = toy_classifier::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for call in 0..10_000 {
        let r = if call % 2 == 0 {
            attack_batch(&m64, &mut rng)
        } else {
            attack_batch(&m32, &mut rng)
        };
        r.map_err(|e| format!("call {call}: {e}"))?;
    }
    let data = sparse_at_core::data::synthetic_dataset(&sparse_at_core::data::SyntheticSpec::new(3, 20, &[6], 3)).unwrap();
    let zero = AttackConfig::pgd(0.0, 0.0, 10);
    let mut rng_a = ChaCha8Rng::seed_from_u64(1);
    let mut rng_b = ChaCha8Rng::seed_from_u64(2);
    let ra = evaluate_accuracy(&m64, &data, Some(&zero), 16, &mut rng_a).unwrap();
    let sa = evaluate_accuracy(&m64, &data, None, 16, &mut rng_b).unwrap();
    ensure(ra.accuracy == sa.accuracy && ra.loss == sa.loss, || {
        format!("eps=0: RA {} vs SA {}", ra.accuracy, sa.accuracy)
    })?;
    within(Duration::from_secs(60), start)?;
    Ok(format!("10000 PGD calls (f64+f32) feasible; eps=0 RA == SA == {:.4}", sa.accuracy))
}

// ------------------------------------------------------- sparsity conservation

fn synthetic_config(extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = [
        "data.name=synthetic",
        "data.synthetic.classes=4",
        "data.synthetic.per_class=170",
        "data.synthetic.test_per_class=15",
        "data.synthetic.shape=3x8x8",
        "data.val_size=40",
        "data.train_size=0",
        "data.test_size=0",
        "data.train_eval_size=40",
        "model.arch=convnet",
        "model.widths=8,16",
        "train.batch_size=16",
        "train.epochs=10",
        "train.milestones=6,8",
        "train.augment=false",
        "train.eval_batch_size=64",
        "attack.train_steps=2",
        "attack.eval_steps=2",
        "fb.update_interval=50",
        "fb.adapt_start=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::load(None, &o).unwrap()
}

fn sparsity_conservation() -> Check {
    let start = Instant::now();
    let cfg = synthetic_config(&["method=flying-bird"]);
    let splits = load_splits(&cfg.data).map_err(|e| e.to_string())?;
    let spec = cfg.model.spec(&splits.train.item_shape, splits.train.classes).unwrap();
    let fb = FbConfig {
        adaptive: false,
        ..cfg.fb.clone()
    };
    let mut model = Model::<f64>::build(&spec, cfg.seed).unwrap();
    let plan = allocate_igq(&model.masks().layers.iter().map(|l| l.len()).collect::<Vec<_>>(), cfg.sparsity).unwrap();
    model.set_masks(&sample_random_mask(model.masks().names, &plan, 5)).unwrap();
    let initial_active = model.masks().active();
    let initial_sparsity = sparsity_of(&model.masks());
    let mut t = Trainer::new(model, cfg.train.clone(), Topology::Dynamic(fb), cfg.seed, 0.0).unwrap();

    let mut failures = Vec::new();
    let mut iterations = 0u64;
    let mut grown_total = 0usize;
    let mut updates = 0usize;
    for _ in 0..10 {
        t.run_epoch_with(&splits, &mut |ev| {
            iterations += 1;
            let masks = ev.model.masks();
            if masks.active() != initial_active || sparsity_of(&masks).to_bits() != initial_sparsity.to_bits() {
                failures.push(format!("iteration {}: sparsity {}", ev.iteration, sparsity_of(&masks)));
            }
            if let Some(u) = ev.update {
                updates += 1;
                for (l, &pi) in ev.model.prunable_indices().iter().enumerate() {
                    for &j in &u.grown[l] {
                        grown_total += 1;
                        let w = ev.model.params[pi].value.data()[j];
                        let v = ev.opt.velocity[pi].data()[j];
                        if w != 0.0 || v != 0.0 {
                            failures.push(format!("iteration {}: grown {l}/{j} weight {w} momentum {v}", ev.iteration));
                        }
                    }
                }
            }
        })
        .map_err(|e| e.to_string())?;
    }
    ensure(failures.is_empty(), || failures[..failures.len().min(3)].join("; "))?;
    ensure(updates > 0 && grown_total > 0, || "no topology update grew any weight".into())?;
    within(Duration::from_secs(300), start)?;
    Ok(format!(
        "{iterations} iterations, {updates} updates, {grown_total} grown weights; sparsity {initial_sparsity} constant"
    ))
}

// --------------------------------------------------------- prune/grow oracle

fn oracle_prune(active: &[bool], w: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).filter(|&i| active[i]).collect();
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && w[idx[j]].abs() < w[idx[j - 1]].abs() {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

fn oracle_grow(active: &[bool], g: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..g.len()).filter(|&i| !active[i]).collect();
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && g[idx[j]].abs() > g[idx[j - 1]].abs() {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

fn prune_grow_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let levels = [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5];
    let value = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.5) {
            levels[rng.gen_range(0..levels.len())]
        } else {
            rng.gen_range(-2.0..2.0)
        }
    };
    for case in 0..200 {
        let layers = rng.gen_range(1..=3);
        let budget = rng.gen_range(layers..=64);
        let mut sizes = vec![1; layers];
        for _ in layers..budget {
            sizes[rng.gen_range(0..layers)] += 1;
        }
        let w: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| value(&mut rng)).collect()).collect();
        let g: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| value(&mut rng)).collect()).collect();
        let act: Vec<Vec<bool>> = sizes.iter().map(|&n| (0..n).map(|_| rng.gen_bool(0.6)).collect()).collect();
        let mask = SparsityMask::new(
            (0..layers).map(|l| format!("l{l}")).collect(),
            act.iter().map(|a| LayerMask::from_bools(a)).collect(),
        );
        let prune_counts: Vec<usize> = act.iter().map(|a| rng.gen_range(0..=a.iter().filter(|&&b| b).count())).collect();
        let grow_counts: Vec<usize> = act.iter().map(|a| rng.gen_range(0..=a.iter().filter(|&&b| !b).count())).collect();

        let mut pm = mask.clone();
        let w_refs: Vec<&[f64]> = w.iter().map(|v| v.as_slice()).collect();
        let pruned = prune_lowest_magnitude(&mut pm, &w_refs, &prune_counts).map_err(|e| e.to_string())?;
        let mut gm = mask.clone();
        let g_refs: Vec<&[f64]> = g.iter().map(|v| v.as_slice()).collect();
        let mut wg = w.clone();
        let mut wg_refs: Vec<&mut [f64]> = wg.iter_mut().map(|v| v.as_mut_slice()).collect();
        let grown = grow_largest_gradient(&mut gm, &g_refs, &grow_counts, &mut wg_refs).map_err(|e| e.to_string())?;

        for l in 0..layers {
            let want_p = oracle_prune(&act[l], &w[l], prune_counts[l]);
            let mut got_p = pruned[l].clone();
            got_p.sort_unstable();
            ensure(got_p == want_p, || format!("case {case} layer {l}: pruned {got_p:?}, oracle {want_p:?}"))?;
            let mut expect_mask = act[l].clone();
            want_p.iter().for_each(|&i| expect_mask[i] = false);
            ensure(pm.layers[l].to_bools() == expect_mask, || format!("case {case} layer {l}: prune mask differs"))?;

            let want_g = oracle_grow(&act[l], &g[l], grow_counts[l]);
            let mut got_g = grown[l].clone();
            got_g.sort_unstable();
            ensure(got_g == want_g, || format!("case {case} layer {l}: grown {got_g:?}, oracle {want_g:?}"))?;
            let mut expect_mask = act[l].clone();
            want_g.iter().for_each(|&i| expect_mask[i] = true);
            ensure(gm.layers[l].to_bools() == expect_mask, || format!("case {case} layer {l}: grow mask differs"))?;
            for i in 0..sizes[l] {
                let want = if want_g.contains(&i) { 0.0 } else { w[l][i] };
                ensure(wg[l][i].to_bits() == want.to_bits(), || format!("case {case} layer {l}: weight {i}"))?;
            }
        }
    }
    Ok("200 instances match the insertion-sort oracle".into())
}

// ------------------------------------------------------------- robust bird

fn oracle_draw(d: &[f64], l: usize, tau: f64) -> Option<usize> {
    (l..=d.len()).find(|&t| d[t - l..t].iter().cloned().fold(f64::NEG_INFINITY, f64::max) < tau)
}

fn robust_bird_draw() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut drawn = 0;
    for case in 0..100 {
        let n = rng.gen_range(1..=40);
        let l = rng.gen_range(1..=6);
        let tau = [0.05, 0.1, 0.2][rng.gen_range(0..3)];
        let d: Vec<f64> = (0..n)
            .map(|i| {
                let decay = 0.5 * (-(i as f64) / 8.0).exp();
                if rng.gen_bool(0.15) {
                    tau
                } else {
                    decay * rng.gen_range(0.2..1.5)
                }
            })
            .collect();
        let want = oracle_draw(&d, l, tau);
        let got = draw_epoch(&d, l, tau);
        ensure(got == want, || format!("case {case}: draw {got:?}, oracle {want:?}"))?;
        let mut det = DrawDetector::new(l, tau);
        let streamed = d.iter().position(|&x| det.push(x)).map(|i| i + 1);
        ensure(streamed == want, || format!("case {case}: streamed {streamed:?}, oracle {want:?}"))?;
        drawn += want.is_some() as usize;
    }

    let spec = ModelSpec::convnet([2, 6, 6], &[4, 6], 3);
    for seed in 0..20 {
        let theta0 = Model::<f64>::build(&spec, seed).unwrap();
        let mut masks = theta0.masks();
        for layer in &mut masks.layers {
            for i in 0..layer.len() {
                layer.set(i, rng.gen_bool(0.3));
            }
        }
        let r = rewind(&theta0, &masks).map_err(|e| e.to_string())?;
        check_rewound(&theta0, &r)?;
    }

    // Search end to end with tau = 1: draws as soon as the queue fills.
    let data = sparse_at_core::data::synthetic_dataset(&sparse_at_core::data::SyntheticSpec::new(3, 16, &[2, 6, 6], 4)).unwrap();
    let theta0 = Model::<f64>::build(&spec, 3).unwrap();
    let rb = RbConfig {
        sparsity: 0.7,
        tau: 1.0,
        queue_len: 2,
        max_epochs: 4,
    };
    let ecfg = TrainConfig {
        regime: Regime::Standard,
        batch_size: 16,
        ..TrainConfig::default()
    }
    .epoch_config(0, data.len());
    let out = find_robust_bird(&theta0, &data, &rb, &ecfg).map_err(|e| e.to_string())?;
    ensure(out.draw_epoch == Some(2), || format!("search drew at {:?}, expected 2", out.draw_epoch))?;
    check_rewound(&theta0, &out.model)?;
    within(Duration::from_secs(60), start)?;
    Ok(format!("100 sequences ({drawn} drawn) match the window-max oracle; rewinds bit-exact"))
}

fn check_rewound(theta0: &Model<f64>, r: &Model<f64>) -> Result<(), String> {
    for (p0, p) in theta0.params.iter().zip(&r.params) {
        match &p.mask {
            Some(m) => {
                for i in 0..m.len() {
                    let want = if m.get(i) { p0.value.data()[i] } else { 0.0 };
                    ensure(p.value.data()[i].to_bits() == want.to_bits(), || format!("{}[{i}] not rewound", p.name))?;
                }
            }
            None => ensure(p.value == p0.value, || format!("{} changed", p.name))?,
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- allocators

fn random_fans(rng: &mut ChaCha8Rng) -> Vec<Fan> {
    (0..rng.gen_range(1..=6))
        .map(|_| {
            if rng.gen_bool(0.5) {
                Fan::Linear {
                    fan_in: rng.gen_range(1..=64),
                    fan_out: rng.gen_range(1..=64),
                }
            } else {
                let k = [1, 3, 5][rng.gen_range(0..3)];
                Fan::Conv {
                    in_ch: rng.gen_range(1..=16),
                    out_ch: rng.gen_range(1..=16),
                    kh: k,
                    kw: k,
                }
            }
        })
        .collect()
}

fn check_budget(name: &str, case: usize, sizes: &[usize], kept: &[usize], s: f64) -> Result<(), String> {
    let total: usize = sizes.iter().sum();
    let budget = (1.0 - s) * total as f64;
    let got: usize = kept.iter().sum();
    ensure((got as f64 - budget).abs() <= sizes.len() as f64, || {
        format!("{name} case {case}: kept {got}, budget {budget:.2} over {} layers", sizes.len())
    })?;
    ensure(kept.iter().zip(sizes).all(|(k, n)| k <= n), || format!("{name} case {case}: density above 1"))
}

fn check_plan(name: &str, case: usize, plan: &AllocationPlan, s: f64) -> Result<(), String> {
    ensure(plan.densities.iter().all(|d| (0.0..=1.0).contains(d)), || format!("{name} case {case}: density outside [0,1]"))?;
    check_budget(name, case, &plan.sizes, &plan.kept_counts(), s)?;
    let mask = sample_random_mask((0..plan.sizes.len()).map(|i| i.to_string()).collect(), plan, case as u64);
    ensure(mask.active() == plan.kept_counts().iter().sum::<usize>(), || format!("{name} case {case}: sampled mask count"))
}

fn allocator_budgets() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut monotone_checked = 0;
    for case in 0..50 {
        let fans = random_fans(&mut rng);
        let sizes: Vec<usize> = fans.iter().map(|f| f.numel()).collect();
        let s = if case == 0 { 0.0 } else { rng.gen_range(0.05..0.95) };
        check_plan("uniform", case, &allocate_uniform(&sizes, s).map_err(|e| e.to_string())?, s)?;
        check_plan("erk", case, &allocate_erk(&fans, s).map_err(|e| e.to_string())?, s)?;
        let igq = allocate_igq(&sizes, s).map_err(|e| e.to_string())?;
        check_plan("igq", case, &igq, s)?;
        if s > 0.0 {
            for i in 0..sizes.len() {
                for j in 0..sizes.len() {
                    if sizes[i] < sizes[j] {
                        ensure(igq.densities[i] > igq.densities[j], || {
                            format!("igq case {case}: n={} d={} vs n={} d={}", sizes[i], igq.densities[i], sizes[j], igq.densities[j])
                        })?;
                        monotone_checked += 1;
                    }
                }
            }
        }

        let hidden: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(2..=24)).collect();
        let input = rng.gen_range(2..=20);
        let model = Model::<f64>::build(&ModelSpec::mlp(input, &hidden, 4), case as u64).unwrap();
        let mut brng = ChaCha8Rng::seed_from_u64(case as u64);
        let x = random_tensor(&mut brng, &[8, input]);
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let (plan, mask) = allocate_snip(&model, &x, &labels, s).map_err(|e| e.to_string())?;
        let kept: Vec<usize> = mask.layers.iter().map(|l| l.active()).collect();
        check_budget("snip", case, &plan.sizes, &kept, s)?;
        check_plan("snip", case, &plan, s)?;
    }
    Ok(format!("50 configurations within +-1 per layer; {monotone_checked} IGQ size pairs strictly ordered"))
}

// ------------------------------------------------------------------- flops

fn flops_spec() -> (ModelSpec, f64, f64) {
    let spec = ModelSpec::new(
        &[3, 16, 16],
        10,
        vec![
            LayerKind::conv(3, 32, 3, 1, 1),
            LayerKind::BatchNorm { channels: 32 },
            LayerKind::Relu,
            LayerKind::AvgPool { kernel: 2 },
            LayerKind::conv(32, 64, 3, 1, 1),
            LayerKind::Relu,
            LayerKind::GlobalAvgPool,
            LayerKind::Linear {
                in_features: 64,
                out_features: 10,
                bias: false,
                prunable: false,
            },
        ],
    );
    let conv1 = 2.0 * (3 * 9 * 32 * 16 * 16) as f64;
    let conv2 = 2.0 * (32 * 9 * 64 * 8 * 8) as f64;
    let fc = 2.0 * (64 * 10) as f64;
    (spec, conv1 + conv2, fc)
}

fn flops_accounting() -> Check {
    let (spec, prunable, fixed) = flops_spec();
    let dense = prunable + fixed;
    let fm = FlopModel::new(&spec).map_err(|e| e.to_string())?;
    ensure(fm.dense_forward() == dense, || format!("dense forward {} vs hand count {dense}", fm.dense_forward()))?;
    let b = 8;
    let it = fm.iteration(&[1.0, 1.0], b, 10).map_err(|e| e.to_string())?;
    ensure(it == 33.0 * dense * b as f64, || format!("PGD-10 iteration {it} vs 33F = {}", 33.0 * dense * b as f64))?;

    // The training loop itself charges 33F for one dense PGD-10 step.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images: Vec<f32> = (0..b * 3 * 256).map(|_| rng.gen()).collect();
    let data = Dataset::new(vec![3, 16, 16], images, (0..b).map(|i| i % 10).collect(), 10).unwrap();
    let mut model = Model::<f64>::build(&spec, 0).unwrap();
    let mut opt = OptimizerState::new(&model);
    let ecfg = TrainConfig {
        batch_size: b,
        regime: Regime::Pgd(AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 10)),
        schedule: LrSchedule::multistep(0.01, &[]),
        augment: false,
        ..TrainConfig::default()
    }
    .epoch_config(0, b);
    let mut iteration = 0;
    let stats = train_epoch(&mut model, &mut opt, &data, &ecfg, &fm, 0, &mut iteration, &mut |_, _, _| Ok(0.0))
        .map_err(|e| e.to_string())?;
    ensure(stats.flops == 33.0 * dense * b as f64, || format!("training loop charged {} for one step", stats.flops))?;

    let mut worst = 0.0f64;
    for (k, d) in [0.25, 0.5, 0.75, 0.9].into_iter().enumerate() {
        let mut m = Model::<f64>::build(&spec, k as u64).unwrap();
        let sizes: Vec<usize> = m.masks().layers.iter().map(|l| l.len()).collect();
        let plan = allocate_uniform(&sizes, 1.0 - d).unwrap();
        m.set_masks(&sample_random_mask(m.masks().names, &plan, k as u64)).unwrap();
        let got = fm.iteration(&m.masks().densities(), b, 10).unwrap();
        let want = 33.0 * b as f64 * (d * prunable + fixed);
        let rel = (got - want).abs() / want;
        worst = worst.max(rel);
        ensure(rel <= 1e-3, || format!("density {d}: {got} vs {want} ({:.4}%)", rel * 100.0))?;
    }
    Ok(format!("33F exact (F = {dense}); density scaling max deviation {:.4}%", worst * 100.0))
}

// ------------------------------------------------------ desk-scale directional

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_scale(dir: &Path) -> Check {
    ensure(dir.join("data_batch_1.bin").exists(), || format!("CIFAR-10 binaries not found in {}", dir.display()))?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs: Vec<(String, Summary)> = Vec::new();
    for method in ["dense-AT", "flying-bird+"] {
        for seed in 0..3u64 {
            let cfg = ExperimentConfig::load(
                None,
                &[
                    format!("method={method}"),
                    format!("seed={seed}"),
                    format!("data.path={}", dir.display()),
                    "sparsity.target=0.8".into(),
                ],
            )
            .map_err(|e| e.to_string())?;
            let splits = load_splits(&cfg.data).map_err(|e| e.to_string())?;
            let opts = RunOptions {
                out: tmp.path().join(format!("{method}-{seed}")),
                ..Default::default()
            };
            let s = run_with_splits(&cfg, &opts, &splits).map_err(|e| e.to_string())?;
            eprintln!(
                "  {method} seed {seed}: best RA {:.2} RGG {:.2} FLOPs {:.3e}",
                s.best_test_ra * 100.0,
                s.rgg * 100.0,
                s.train_flops
            );
            runs.push((method.into(), s));
        }
    }
    let pick = |m: &str, f: fn(&Summary) -> f64| mean(&runs.iter().filter(|(k, _)| k == m).map(|(_, s)| f(s)).collect::<Vec<_>>());
    let (dense_rgg, fb_rgg) = (pick("dense-AT", |s| s.rgg), pick("flying-bird+", |s| s.rgg));
    let (dense_ra, fb_ra) = (pick("dense-AT", |s| s.best_test_ra), pick("flying-bird+", |s| s.best_test_ra));
    let (dense_fl, fb_fl) = (pick("dense-AT", |s| s.train_flops), pick("flying-bird+", |s| s.train_flops));
    let report = format!(
        "RGG {:.2} -> {:.2}, best RA {:.2} -> {:.2}, FLOPs ratio {:.3}",
        dense_rgg * 100.0,
        fb_rgg * 100.0,
        dense_ra * 100.0,
        fb_ra * 100.0,
        fb_fl / dense_fl
    );
    ensure(fb_rgg <= 0.8 * dense_rgg, || format!("(a) RGG not 20% lower: {report}"))?;
    ensure((fb_ra - dense_ra).abs() <= 0.03, || format!("(b) RA gap above 3 points: {report}"))?;
    ensure(fb_fl <= 0.35 * dense_fl, || format!("(c) FLOPs above 35%: {report}"))?;
    Ok(report)
}

// ------------------------------------------------- determinism and resume

fn small_run_config(method: &str) -> ExperimentConfig {
    synthetic_config(&[
        &format!("method={method}"),
        "train.epochs=4",
        "train.milestones=3",
        "train.augment=true",
        "data.synthetic.per_class=40",
        "data.synthetic.shape=3x8x8",
        "fb.update_interval=4",
        "rb.max_epochs=3",
        "rb.queue_len=2",
        "omp.pretrain_epochs=1",
    ])
}

fn run_metrics(cfg: &ExperimentConfig, opts: &RunOptions, splits: &Splits) -> Result<String, String> {
    run_with_splits(cfg, opts, splits).map_err(|e| e.to_string())?;
    std::fs::read_to_string(opts.out.join(METRICS_FILE)).map_err(|e| e.to_string())
}

const RUN_METHODS: [&str; 4] = ["flying-bird+", "robust-bird", "dense-AT", "OMP"];

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for method in RUN_METHODS {
        let cfg = small_run_config(method);
        let splits = load_splits(&cfg.data).map_err(|e| e.to_string())?;
        let out = |n: &str| RunOptions {
            out: tmp.path().join(format!("{method}-{n}")),
            ..Default::default()
        };
        let a = run_metrics(&cfg, &out("a"), &splits)?;
        let b = run_metrics(&cfg, &out("b"), &splits)?;
        ensure(a.as_bytes() == b.as_bytes(), || format!("{method}: metrics.csv differs between runs"))?;
        ensure(a.lines().count() == cfg.train.epochs + 1, || format!("{method}: wrong row count"))?;
    }
    Ok(format!("byte-identical metrics.csv for {}", RUN_METHODS.join(", ")))
}

fn checkpoint_resume() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for method in RUN_METHODS {
        let cfg = small_run_config(method);
        let splits = load_splits(&cfg.data).map_err(|e| e.to_string())?;
        let whole = run_metrics(
            &cfg,
            &RunOptions {
                out: tmp.path().join(format!("{method}-whole")),
                ..Default::default()
            },
            &splits,
        )?;
        let dir = tmp.path().join(format!("{method}-split"));
        run_metrics(
            &cfg,
            &RunOptions {
                out: dir.clone(),
                resume: false,
                stop_after: Some(2),
            },
            &splits,
        )?;
        let resumed = run_metrics(
            &cfg,
            &RunOptions {
                out: dir,
                resume: true,
                stop_after: None,
            },
            &splits,
        )?;
        for (i, (a, b)) in whole.lines().zip(resumed.lines()).enumerate() {
            ensure(a == b, || format!("{method} row {i}: {a} vs {b}"))?;
        }
        ensure(whole.lines().count() == resumed.lines().count(), || format!("{method}: row counts differ"))?;
    }
    Ok(format!("resumed after epoch 2 matches row-for-row for {}", RUN_METHODS.join(", ")))
}

// -------------------------------------------------------------------- main

struct Criterion {
    name: &'static str,
    run: Box<dyn Fn() -> Check>,
    ignored: bool,
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let include_ignored = args.iter().any(|a| a == "--include-ignored" || a == "--ignored");
    let filter = args.iter().find(|a| !a.starts_with('-')).cloned();
    let cifar: Option<PathBuf> = std::env::var_os("SPARSE_AT_CIFAR10").map(PathBuf::from);
    let desk_enabled = include_ignored || cifar.is_some();
    let cifar_dir = cifar.unwrap_or_else(|| PathBuf::from("data/cifar-10-batches-bin"));

    let criteria = vec![
        Criterion { name: "gradient correctness", run: Box::new(gradient_correctness), ignored: false },
        Criterion { name: "attack invariants", run: Box::new(attack_invariants), ignored: false },
        Criterion { name: "sparsity conservation", run: Box::new(sparsity_conservation), ignored: false },
        Criterion { name: "prune/grow oracle equivalence", run: Box::new(prune_grow_oracle), ignored: false },
        Criterion { name: "robust bird draw", run: Box::new(robust_bird_draw), ignored: false },
        Criterion { name: "allocator budgets", run: Box::new(allocator_budgets), ignored: false },
        Criterion { name: "flops accounting", run: Box::new(flops_accounting), ignored: false },
        Criterion {
            name: "desk-scale directional reproduction (CIFAR-10)",
            run: Box::new(move || desk_scale(&cifar_dir)),
            ignored: !desk_enabled,
        },
        Criterion { name: "determinism", run: Box::new(determinism), ignored: false },
        Criterion { name: "checkpoint resume", run: Box::new(checkpoint_resume), ignored: false },
    ];

    let mut failed = 0;
    for c in criteria {
        if filter.as_ref().is_some_and(|f| !c.name.contains(f.as_str())) {
            continue;
        }
        if c.ignored {
            println!("IGNORED {} (set SPARSE_AT_CIFAR10 or pass --include-ignored)", c.name);
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| (c.run)())).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} [{secs:.1}s]: {detail}", c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} [{secs:.1}s]: {detail}", c.name);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
