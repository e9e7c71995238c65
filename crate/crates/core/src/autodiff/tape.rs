use super::kernels::{self, BnSaved, ConvGeom};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, Op, BN_EPS, BN_MOMENTUM};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Saved<T> {
    Conv { weight: Tensor<T>, geom: ConvGeom },
    Linear { weight: Tensor<T> },
    BatchNorm(BnSaved<T>),
    None,
}

#[derive(Debug, Clone)]
enum Loss<T> {
    CrossEntropy { probs: Vec<T>, labels: Vec<usize> },
    SumSquares,
}

/// Record of one forward pass: every node output plus what each node's
/// backward rule needs. Backward walks the nodes once, in reverse order.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    saved: Vec<Saved<T>>,
    loss: Option<Loss<T>>,
    consumed: bool,
}

/// Which gradients a backward pass produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BackwardOptions {
    /// Also return the gradient with respect to the model input.
    pub input_grad: bool,
    /// Keep gradients at masked-out positions (needed to rank growth
    /// candidates). Otherwise those entries are zeroed.
    pub dense: bool,
}

/// Batch statistics gathered in training mode, one entry per batch-norm.
pub(crate) type BnUpdates<T> = Vec<(usize, Vec<T>, Vec<T>)>;

impl<T: Real> Tape<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.values.last().expect("tape has an input")
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.values[0]
    }

    /// Mean softmax cross-entropy of the logits; registers it as the loss.
    pub fn cross_entropy(&mut self, labels: &[usize]) -> Result<T> {
        let (loss, probs) = softmax_cross_entropy(self.logits(), labels)?;
        self.loss = Some(Loss::CrossEntropy {
            probs,
            labels: labels.to_vec(),
        });
        Ok(loss)
    }

    /// Sum of squared logits; registers it as the loss.
    pub fn sum_squares(&mut self) -> T {
        let l = self.logits().data().iter().map(|&v| v * v).sum();
        self.loss = Some(Loss::SumSquares);
        l
    }

    fn output_grad(&self) -> Result<Tensor<T>> {
        let logits = self.logits();
        match &self.loss {
            None => Err(Error::InvalidArgument("no scalar loss recorded on the tape".into())),
            Some(Loss::SumSquares) => {
                let two = T::lit(2.0);
                Tensor::from_vec(logits.shape(), logits.data().iter().map(|&v| two * v).collect())
            }
            Some(Loss::CrossEntropy { probs, labels }) => {
                let n = logits.batch();
                let classes = logits.item_len();
                let inv = T::one() / T::lit(n as f64);
                let mut g = probs.clone();
                for (b, &y) in labels.iter().enumerate() {
                    g[b * classes + y] = g[b * classes + y] - T::one();
                }
                g.iter_mut().for_each(|v| *v = *v * inv);
                Tensor::from_vec(logits.shape(), g)
            }
        }
    }

    /// Gradients of the recorded loss. Parameter gradients overwrite
    /// `param.grad`; returns the input gradient when requested.
    pub fn backward(&mut self, model: &mut Model<T>, opts: BackwardOptions) -> Result<Option<Tensor<T>>> {
        let (grads, dx) = self.run_backward(model, true, opts.input_grad)?;
        for (p, g) in model.params.iter_mut().zip(grads) {
            p.grad = g.unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            if !opts.dense {
                if let Some(mask) = &p.mask {
                    for i in mask.zeros_iter() {
                        p.grad.data_mut()[i] = T::zero();
                    }
                }
            }
        }
        Ok(dx)
    }

    /// Gradient with respect to the input only; parameters are untouched.
    pub fn input_gradient(&mut self, model: &Model<T>) -> Result<Tensor<T>> {
        let (_, dx) = self.run_backward(model, false, true)?;
        Ok(dx.expect("input gradient requested"))
    }

    #[allow(clippy::type_complexity)]
    fn run_backward(
        &mut self,
        model: &Model<T>,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Vec<Option<Tensor<T>>>, Option<Tensor<T>>)> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if model.nodes.len() + 1 != self.values.len() {
            return Err(Error::InvalidArgument("tape was recorded on a different model".into()));
        }
        let seed = self.output_grad()?;
        self.consumed = true;

        let mut pgrads: Vec<Option<Tensor<T>>> = vec![None; model.params.len()];
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        *grads.last_mut().expect("output") = Some(seed);

        // Which node outputs need a gradient at all.
        let mut needed = vec![false; self.values.len()];
        needed[0] = want_input;
        for (i, node) in model.nodes.iter().enumerate() {
            let has_params = want_params
                && matches!(node.op, Op::Conv2d { .. } | Op::Linear { .. } | Op::BatchNorm { .. });
            if has_params || node.inputs.iter().any(|&j| needed[j]) {
                needed[i + 1] = true;
            }
        }

        for i in (0..model.nodes.len()).rev() {
            let Some(dy) = grads[i + 1].take() else { continue };
            let node = &model.nodes[i];
            let in_id = node.inputs[0];
            let x = &self.values[in_id];
            let want_dx = needed[in_id];
            let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
            match (&node.op, &self.saved[i]) {
                (Op::Conv2d { weight, bias, .. }, Saved::Conv { weight: w, geom }) => {
                    let mut dw = want_params.then(|| Tensor::zeros(w.shape()));
                    let mut db = bias.filter(|_| want_params).map(|b| Tensor::zeros(model.params[b].value.shape()));
                    kernels::conv2d_backward(
                        x.data(),
                        x.batch(),
                        geom,
                        w.data(),
                        dy.data(),
                        dw.as_mut().map(|t| t.data_mut()),
                        db.as_mut().map(|t| t.data_mut()),
                        dx.as_mut().map(|t| t.data_mut()),
                    );
                    if let Some(dw) = dw {
                        pgrads[*weight] = Some(dw);
                    }
                    if let (Some(b), Some(db)) = (bias, db) {
                        pgrads[*b] = Some(db);
                    }
                }
                (Op::Linear { weight, bias }, Saved::Linear { weight: w }) => {
                    let (fout, fin) = (w.shape()[0], w.shape()[1]);
                    let mut dw = want_params.then(|| Tensor::zeros(w.shape()));
                    let mut db = bias.filter(|_| want_params).map(|_| Tensor::zeros(&[fout]));
                    kernels::linear_backward(
                        x.data(),
                        x.batch(),
                        fin,
                        fout,
                        w.data(),
                        dy.data(),
                        dw.as_mut().map(|t| t.data_mut()),
                        db.as_mut().map(|t| t.data_mut()),
                        dx.as_mut().map(|t| t.data_mut()),
                    );
                    if let Some(dw) = dw {
                        pgrads[*weight] = Some(dw);
                    }
                    if let (Some(b), Some(db)) = (bias, db) {
                        pgrads[*b] = Some(db);
                    }
                }
                (Op::BatchNorm { gamma, beta, .. }, Saved::BatchNorm(saved)) => {
                    let c = x.shape()[1];
                    let hw = x.item_len() / c;
                    let mut dg = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    kernels::batchnorm_backward(
                        saved,
                        dy.data(),
                        x.batch(),
                        c,
                        hw,
                        dg.data_mut(),
                        dbeta.data_mut(),
                        dx.as_mut().map(|t| t.data_mut()),
                    );
                    if want_params {
                        pgrads[*gamma] = Some(dg);
                        pgrads[*beta] = Some(dbeta);
                    }
                }
                (Op::Relu, _) => {
                    if let Some(dx) = dx.as_mut() {
                        let y = self.values[i + 1].data();
                        for ((d, &g), &out) in dx.data_mut().iter_mut().zip(dy.data()).zip(y) {
                            *d = if out > T::zero() { g } else { T::zero() };
                        }
                    }
                }
                (Op::AvgPool { kernel }, _) => {
                    if let Some(dx) = dx.as_mut() {
                        let s = x.shape();
                        kernels::avgpool_backward(dy.data(), s[0] * s[1], s[2], s[3], *kernel, dx.data_mut());
                    }
                }
                (Op::GlobalAvgPool, _) => {
                    if let Some(dx) = dx.as_mut() {
                        let hw = x.shape()[2] * x.shape()[3];
                        let inv = T::one() / T::lit(hw as f64);
                        for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
                            plane.iter_mut().for_each(|v| *v = g * inv);
                        }
                    }
                }
                (Op::Flatten, _) => {
                    if let Some(dx) = dx.as_mut() {
                        dx.data_mut().copy_from_slice(dy.data());
                    }
                }
                (Op::Add, _) => {
                    if let Some(dx) = dx.as_mut() {
                        dx.data_mut().copy_from_slice(dy.data());
                    }
                    let other = node.inputs[1];
                    if needed[other] {
                        accumulate(&mut grads[other], dy.clone());
                    }
                }
                _ => unreachable!("saved state does not match op"),
            }
            if let Some(dx) = dx {
                accumulate(&mut grads[in_id], dx);
            }
        }
        let dx = if want_input { Some(grads[0].take().unwrap_or_else(|| Tensor::zeros(self.values[0].shape()))) } else { None };
        Ok((pgrads, dx))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Mean of `-log softmax(logits)[label]` (log-sum-exp stabilised), together
/// with the softmax probabilities.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let n = logits.batch();
    if logits.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            expected: vec![n, 0],
            got: logits.shape().to_vec(),
        });
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch(n, labels.len()));
    }
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let classes = logits.item_len();
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (b, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for (p, &v) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
            *p = (v - max).exp();
            z = z + *p;
        }
        probs[b * classes..(b + 1) * classes].iter_mut().for_each(|p| *p = *p / z);
        total = total + (z.ln() + max - row[y]);
    }
    let loss = total / T::lit(n as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok((loss, probs))
}

/// Per-example cross-entropy losses.
pub fn per_example_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
    let classes = logits.item_len();
    labels
        .iter()
        .enumerate()
        .map(|(b, &y)| {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            Ok(z.ln() + max - row[y])
        })
        .collect()
}

impl<T: Real> Model<T> {
    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let expect: Vec<usize> = std::iter::once(x.batch()).chain(self.spec.input_shape.iter().copied()).collect();
        if x.shape() != expect.as_slice() || x.batch() == 0 {
            return Err(Error::ShapeMismatch {
                op: "forward",
                expected: expect,
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub(crate) fn record(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tape<T>, BnUpdates<T>)> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(self.nodes.len() + 1);
        values.push(x.clone());
        let mut saved = Vec::with_capacity(self.nodes.len());
        let mut updates = Vec::new();
        for node in &self.nodes {
            let input = &values[node.inputs[0]];
            let n = input.batch();
            let (out, s) = match &node.op {
                Op::Conv2d {
                    weight,
                    bias,
                    kernel,
                    stride,
                    padding,
                } => {
                    let w = self.params[*weight].effective();
                    let sh = input.shape();
                    let (co, k) = (w.shape()[0], *kernel);
                    let geom = ConvGeom {
                        c: sh[1],
                        h: sh[2],
                        w: sh[3],
                        co,
                        k,
                        stride: *stride,
                        pad: *padding,
                        ho: (sh[2] + 2 * padding - k) / stride + 1,
                        wo: (sh[3] + 2 * padding - k) / stride + 1,
                    };
                    let mut out = Tensor::zeros(&[n, co, geom.ho, geom.wo]);
                    let b = bias.map(|b| self.params[b].value.data());
                    kernels::conv2d_forward(input.data(), n, &geom, w.data(), b, out.data_mut());
                    (out, Saved::Conv { weight: w, geom })
                }
                Op::Linear { weight, bias } => {
                    let w = self.params[*weight].effective();
                    let (fout, fin) = (w.shape()[0], w.shape()[1]);
                    let mut out = Tensor::zeros(&[n, fout]);
                    let b = bias.map(|b| self.params[b].value.data());
                    kernels::linear_forward(input.data(), n, fin, fout, w.data(), b, out.data_mut());
                    (out, Saved::Linear { weight: w })
                }
                Op::BatchNorm { gamma, beta, stats } => {
                    let c = input.shape()[1];
                    let hw = input.item_len() / c;
                    let mut out = Tensor::zeros(input.shape());
                    let st = &self.bn_stats[*stats];
                    let running = (mode == Mode::Eval).then_some((st.mean.as_slice(), st.var.as_slice()));
                    let (s, batch) = kernels::batchnorm_forward(
                        input.data(),
                        n,
                        c,
                        hw,
                        self.params[*gamma].value.data(),
                        self.params[*beta].value.data(),
                        running,
                        T::lit(BN_EPS),
                        out.data_mut(),
                    );
                    if let Some((mean, var)) = batch {
                        updates.push((*stats, mean, var));
                    }
                    (out, Saved::BatchNorm(s))
                }
                Op::Relu => {
                    let data = input.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
                    (Tensor::from_vec(input.shape(), data)?, Saved::None)
                }
                Op::AvgPool { kernel } => {
                    let s = input.shape();
                    let mut out = Tensor::zeros(&[s[0], s[1], s[2] / kernel, s[3] / kernel]);
                    kernels::avgpool_forward(input.data(), s[0] * s[1], s[2], s[3], *kernel, out.data_mut());
                    (out, Saved::None)
                }
                Op::GlobalAvgPool => {
                    let s = input.shape();
                    let hw = s[2] * s[3];
                    let inv = T::one() / T::lit(hw as f64);
                    let data = input.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
                    (Tensor::from_vec(&[s[0], s[1]], data)?, Saved::None)
                }
                Op::Flatten => (input.clone().reshape(&[n, input.item_len()])?, Saved::None),
                Op::Add => {
                    let other = &values[node.inputs[1]];
                    if other.shape() != input.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "add",
                            expected: input.shape().to_vec(),
                            got: other.shape().to_vec(),
                        });
                    }
                    let mut out = input.clone();
                    out.add_assign(other);
                    (out, Saved::None)
                }
            };
            out.ensure_finite(op_name(&node.op))?;
            values.push(out);
            saved.push(s);
        }
        Ok((
            Tape {
                values,
                saved,
                loss: None,
                consumed: false,
            },
            updates,
        ))
    }

    /// Forward pass recorded on a tape. In [`Mode::Train`] batch-norm uses
    /// batch statistics and updates its running statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tape<T>> {
        let (tape, updates) = self.record(x, mode)?;
        let m = T::lit(BN_MOMENTUM);
        for (idx, mean, var) in updates {
            let st = &mut self.bn_stats[idx];
            for (r, v) in st.mean.iter_mut().zip(mean) {
                *r = (T::one() - m) * *r + m * v;
            }
            for (r, v) in st.var.iter_mut().zip(var) {
                *r = (T::one() - m) * *r + m * v;
            }
        }
        Ok(tape)
    }

    /// Eval-mode forward pass on a tape; the model is not modified.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tape<T>> {
        Ok(self.record(x, Mode::Eval)?.0)
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = self.forward_eval(x)?;
        Ok(tape.values.into_iter().last().expect("output"))
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Conv2d { .. } => "conv2d",
        Op::Linear { .. } => "linear",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Relu => "relu",
        Op::AvgPool { .. } => "avg_pool",
        Op::GlobalAvgPool => "global_avg_pool",
        Op::Flatten => "flatten",
        Op::Add => "add",
    }
}
