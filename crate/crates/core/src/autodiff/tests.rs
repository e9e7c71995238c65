use super::*;
use crate::error::Error;
use crate::model::{Mode, Model};
use crate::models::{LayerKind, ModelSpec};
use crate::tensor::Tensor;

fn identity_linear(n: usize) -> Model<f64> {
    let spec = ModelSpec::new(&[n], n, vec![LayerKind::linear(n, n, true)]);
    let mut m = Model::build(&spec, 0).unwrap();
    let w = m.params[0].value.data_mut();
    w.iter_mut().enumerate().for_each(|(i, v)| *v = if i % (n + 1) == 0 { 1.0 } else { 0.0 });
    m
}

#[test]
fn identity_linear_forward() {
    let m = identity_linear(2);
    let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
    assert_eq!(m.logits(&x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn pointwise_conv_identity() {
    let spec = ModelSpec::new(&[1, 2, 2], 4, vec![LayerKind::conv(1, 1, 1, 1, 0), LayerKind::Flatten]);
    let mut m = Model::<f64>::build(&spec, 0).unwrap();
    m.params[0].value.data_mut()[0] = 1.0;
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    assert_eq!(m.logits(&x).unwrap().data(), x.data());
}

#[test]
fn masked_forward_equals_zeroed_weights() {
    let spec = ModelSpec::convnet([2, 6, 6], &[3, 4], 3);
    let mut masked = Model::<f64>::build(&spec, 5).unwrap();
    let mut zeroed = masked.clone();
    let mut masks = masked.masks();
    for (l, layer) in masks.layers.iter_mut().enumerate() {
        for i in (l % 3..layer.len()).step_by(3) {
            layer.set(i, false);
        }
    }
    // Install masks without zeroing the stored values: forward must still
    // read masked entries as zero.
    let idx = masked.prunable_indices();
    for (&p, m) in idx.iter().zip(&masks.layers) {
        masked.params[p].mask = Some(m.clone());
        for i in m.zeros_iter() {
            zeroed.params[p].value.data_mut()[i] = 0.0;
        }
    }
    let x = Tensor::from_vec(&[2, 2, 6, 6], (0..144).map(|i| (i as f64 * 0.1).sin().abs()).collect()).unwrap();
    let a = masked.forward(&x, Mode::Train).unwrap();
    let b = zeroed.forward(&x, Mode::Train).unwrap();
    assert_eq!(a.logits(), b.logits());
    assert_eq!(masked.bn_stats, zeroed.bn_stats);
}

#[test]
fn fully_masked_weight_matches_zero_weight() {
    let spec = ModelSpec::mlp(3, &[4], 2);
    let mut masked = Model::<f64>::build(&spec, 2).unwrap();
    let mut zeroed = masked.clone();
    let mut masks = masked.masks();
    masks.layers[0] = crate::sparsity::LayerMask::zeros(12);
    masked.params[0].mask = Some(masks.layers[0].clone());
    zeroed.params[0].value.fill(0.0);
    let x = Tensor::from_vec(&[1, 3], vec![0.3, 0.5, 0.9]).unwrap();
    assert_eq!(masked.logits(&x).unwrap(), zeroed.logits(&x).unwrap());
}

#[test]
fn cross_entropy_examples() {
    let x = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
    let (l, _) = softmax_cross_entropy(&x, &[0]).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-15);

    let x = Tensor::<f64>::from_vec(&[1, 2], vec![1000.0, 0.0]).unwrap();
    let (l, _) = softmax_cross_entropy(&x, &[0]).unwrap();
    assert!(l.is_finite() && l.abs() < 1e-12);

    let row = [0.3, -1.2, 2.0];
    let one = Tensor::<f64>::from_vec(&[1, 3], row.to_vec()).unwrap();
    let two = Tensor::from_vec(&[2, 3], [row, row].concat()).unwrap();
    let (a, _) = softmax_cross_entropy(&one, &[2]).unwrap();
    let (b, _) = softmax_cross_entropy(&two, &[2, 2]).unwrap();
    assert!((a - b).abs() < 1e-15);

    assert_eq!(
        softmax_cross_entropy(&one, &[3]).unwrap_err(),
        Error::LabelOutOfRange { label: 3, classes: 3 }
    );
}

#[test]
fn square_loss_gradient() {
    let spec = ModelSpec::new(&[1], 1, vec![LayerKind::linear(1, 1, false)]);
    let mut m = Model::<f64>::build(&spec, 0).unwrap();
    m.params[0].value.data_mut()[0] = 3.0;
    let x = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
    let mut tape = m.forward(&x, Mode::Train).unwrap();
    assert_eq!(tape.sum_squares(), 9.0);
    tape.backward(&mut m, BackwardOptions::default()).unwrap();
    assert_eq!(m.params[0].grad.data(), &[6.0]);
}

#[test]
fn cross_entropy_logit_gradient() {
    // Logits equal the input under an identity layer, so the input gradient is
    // the logit gradient softmax − onehot (divided by the batch size of 1).
    let mut m = identity_linear(2);
    let x = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
    let mut tape = m.forward(&x, Mode::Eval).unwrap();
    tape.cross_entropy(&[0]).unwrap();
    let g = tape
        .backward(&mut m, BackwardOptions { input_grad: true, dense: false })
        .unwrap()
        .unwrap();
    assert!((g.data()[0] + 0.5).abs() < 1e-15);
    assert!((g.data()[1] - 0.5).abs() < 1e-15);

    let h = 1e-6;
    for i in 0..2 {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let fd = (softmax_cross_entropy(&up, &[0]).unwrap().0 - softmax_cross_entropy(&down, &[0]).unwrap().0) / (2.0 * h);
        assert!((fd - g.data()[i]).abs() < 1e-8);
    }
}

#[test]
fn masked_and_dense_gradient_modes() {
    let spec = ModelSpec::mlp(3, &[4], 2);
    let mut m = Model::<f64>::build(&spec, 9).unwrap();
    let x = Tensor::from_vec(&[2, 3], vec![0.2, 0.7, 0.1, 0.9, 0.4, 0.6]).unwrap();
    let labels = [1, 0];
    let grads = |m: &mut Model<f64>, dense: bool| {
        let mut tape = m.forward(&x, Mode::Eval).unwrap();
        tape.cross_entropy(&labels).unwrap();
        tape.backward(m, BackwardOptions { input_grad: false, dense }).unwrap();
        m.params[0].grad.data().to_vec()
    };
    let unmasked = grads(&mut m, false);
    let target = (0..unmasked.len())
        .max_by(|&a, &b| unmasked[a].abs().total_cmp(&unmasked[b].abs()))
        .unwrap();
    let mut masks = m.masks();
    masks.layers[0].set(target, false);
    m.set_masks(&masks).unwrap();

    assert_eq!(grads(&mut m, false)[target], 0.0);
    let dense = grads(&mut m, true)[target];

    // Finite differences on the unmasked model around the (zero) weight.
    let mut open = m.clone();
    open.clear_masks();
    let h = 1e-6;
    let loss = |model: &Model<f64>| {
        let mut t = model.forward_eval(&x).unwrap();
        t.cross_entropy(&labels).unwrap()
    };
    open.params[0].value.data_mut()[target] = h;
    let up = loss(&open);
    open.params[0].value.data_mut()[target] = -h;
    let down = loss(&open);
    let fd = (up - down) / (2.0 * h);
    assert!(dense != 0.0);
    assert!((dense - fd).abs() < 1e-7 * fd.abs().max(1.0), "{dense} vs {fd}");
}

#[test]
fn tape_consumed_twice() {
    let mut m = identity_linear(2);
    let x = Tensor::from_vec(&[1, 2], vec![0.5, 0.1]).unwrap();
    let mut tape = m.forward(&x, Mode::Eval).unwrap();
    tape.cross_entropy(&[1]).unwrap();
    tape.backward(&mut m, BackwardOptions::default()).unwrap();
    assert_eq!(tape.backward(&mut m, BackwardOptions::default()).unwrap_err(), Error::TapeConsumed);
}

#[test]
fn backward_without_loss_is_an_error() {
    let mut m = identity_linear(2);
    let x = Tensor::from_vec(&[1, 2], vec![0.5, 0.1]).unwrap();
    let mut tape = m.forward(&x, Mode::Eval).unwrap();
    assert!(tape.backward(&mut m, BackwardOptions::default()).is_err());
}

#[test]
fn shape_mismatch_and_non_finite() {
    let mut m = identity_linear(2);
    let x = Tensor::from_vec(&[1, 3], vec![0.5, 0.1, 0.0]).unwrap();
    assert!(matches!(m.forward(&x, Mode::Eval), Err(Error::ShapeMismatch { .. })));
    m.params[0].value.data_mut()[0] = f64::INFINITY;
    let x = Tensor::from_vec(&[1, 2], vec![0.5, 0.1]).unwrap();
    assert_eq!(m.logits(&x).unwrap_err(), Error::NonFinite("linear"));
}

#[test]
fn eval_mode_is_repeatable() {
    let spec = ModelSpec::resnet([3, 8, 8], 1, 4, 4);
    let mut m = Model::<f64>::build(&spec, 1).unwrap();
    let x = Tensor::from_vec(&[3, 3, 8, 8], (0..576).map(|i| ((i * 37) % 100) as f64 / 100.0).collect()).unwrap();
    m.forward(&x, Mode::Train).unwrap();
    let before = m.bn_stats.clone();
    let a = m.logits(&x).unwrap();
    let b = m.logits(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(m.bn_stats, before);
}

fn toy_batch(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

#[test]
fn grad_check_linear_relu() {
    let spec = ModelSpec::mlp(5, &[7], 3);
    let m = Model::<f64>::build(&spec, 11).unwrap();
    let x = toy_batch(&[4, 5], 1);
    let r = grad_check(&m, &x, &[0, 1, 2, 1], &GradCheckConfig::default()).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn grad_check_conv_batchnorm_train() {
    let spec = ModelSpec::new(
        &[2, 5, 5],
        3,
        vec![
            LayerKind::conv(2, 3, 3, 1, 1),
            LayerKind::BatchNorm { channels: 3 },
            LayerKind::GlobalAvgPool,
        ],
    );
    let m = Model::<f64>::build(&spec, 12).unwrap();
    let x = toy_batch(&[3, 2, 5, 5], 2);
    let r = grad_check(&m, &x, &[0, 2, 1], &GradCheckConfig::default()).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn grad_check_detects_corruption() {
    let spec = ModelSpec::mlp(5, &[7], 3);
    let m = Model::<f64>::build(&spec, 11).unwrap();
    let x = toy_batch(&[4, 5], 1);
    let cfg = GradCheckConfig {
        gradient_scale: 1.1,
        ..Default::default()
    };
    let r = grad_check(&m, &x, &[0, 1, 2, 1], &cfg).unwrap();
    assert!(!r.passed && r.max_rel_error > cfg.tolerance);
}
