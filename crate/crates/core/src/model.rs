//! Parameter storage and the compiled layer graph of a [`ModelSpec`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::{LayerKind, ModelSpec};
use crate::real::Real;
use crate::sparsity::{LayerMask, SparsityMask};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub mask: Option<LayerMask>,
    pub prunable: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, prunable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            mask: None,
            prunable,
        }
    }

    /// Zeroes every masked-out element of the value.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for i in mask.zeros_iter() {
                self.value.data_mut()[i] = T::zero();
            }
        }
    }

    /// Value with masked-out entries read as exact zeros.
    pub fn effective(&self) -> Tensor<T> {
        match &self.mask {
            None => self.value.clone(),
            Some(mask) => {
                let mut v = self.value.clone();
                for i in mask.zeros_iter() {
                    v.data_mut()[i] = T::zero();
                }
                v
            }
        }
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// A differentiable node. Node `i` reads the outputs listed in `inputs`,
/// where id 0 is the model input and id `j + 1` is the output of node `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv2d {
        weight: usize,
        bias: Option<usize>,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        weight: usize,
        bias: Option<usize>,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        stats: usize,
    },
    Relu,
    AvgPool {
        kernel: usize,
    },
    GlobalAvgPool,
    Flatten,
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm; running statistics updated.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Parameters, optional masks and the compiled graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: Vec<Parameter<T>>,
    pub bn_stats: Vec<BnStats<T>>,
    pub nodes: Vec<Node>,
}

struct Builder<'a, T> {
    params: Vec<Parameter<T>>,
    bn_stats: Vec<BnStats<T>>,
    nodes: Vec<Node>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn push(&mut self, op: Op, inputs: Vec<usize>) -> usize {
        self.nodes.push(Node { op, inputs });
        self.nodes.len()
    }

    fn he_normal(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
        let std = gain / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::lit(z * std)
            })
            .collect();
        Tensor::from_vec(shape, data).expect("shape")
    }

    fn param(&mut self, name: String, value: Tensor<T>, prunable: bool) -> usize {
        self.params.push(Parameter::new(name, value, prunable));
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        prefix: &str,
        input: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        prunable: bool,
    ) -> usize {
        let fan_in = in_ch * kernel * kernel;
        let w = self.he_normal(&[out_ch, in_ch, kernel, kernel], fan_in, 2f64.sqrt());
        let weight = self.param(format!("{prefix}.weight"), w, prunable);
        let bias = bias.then(|| self.param(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]), false));
        self.push(
            Op::Conv2d {
                weight,
                bias,
                kernel,
                stride,
                padding,
            },
            vec![input],
        )
    }

    fn batch_norm(&mut self, prefix: &str, input: usize, channels: usize) -> usize {
        let gamma = self.param(format!("{prefix}.gamma"), Tensor::full(&[channels], T::one()), false);
        let beta = self.param(format!("{prefix}.beta"), Tensor::zeros(&[channels]), false);
        self.bn_stats.push(BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        let stats = self.bn_stats.len() - 1;
        self.push(Op::BatchNorm { gamma, beta, stats }, vec![input])
    }
}

impl<T: Real> Model<T> {
    /// Builds and He-initialises a model: fan-in scaled normal weights (gain
    /// √2, except 1 for the final classifier), zero biases, unit batch-norm
    /// scale and zero shift. Masks start absent (dense).
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            bn_stats: Vec::new(),
            nodes: Vec::new(),
            rng: &mut rng,
        };
        let last_linear = spec
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerKind::Linear { .. }));
        let mut cur = 0usize;
        for (i, layer) in spec.layers.iter().enumerate() {
            let prefix = format!("l{i}");
            cur = match *layer {
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                    bias,
                    prunable,
                } => b.conv(&prefix, cur, in_ch, out_ch, kernel, stride, padding, bias, prunable),
                LayerKind::Linear {
                    in_features,
                    out_features,
                    bias,
                    prunable,
                } => {
                    let gain = if Some(i) == last_linear { 1.0 } else { 2f64.sqrt() };
                    let w = b.he_normal(&[out_features, in_features], in_features, gain);
                    let weight = b.param(format!("{prefix}.weight"), w, prunable);
                    let bias = bias.then(|| {
                        b.param(format!("{prefix}.bias"), Tensor::zeros(&[out_features]), false)
                    });
                    b.push(Op::Linear { weight, bias }, vec![cur])
                }
                LayerKind::BatchNorm { channels } => b.batch_norm(&prefix, cur, channels),
                LayerKind::Relu => b.push(Op::Relu, vec![cur]),
                LayerKind::AvgPool { kernel } => b.push(Op::AvgPool { kernel }, vec![cur]),
                LayerKind::GlobalAvgPool => b.push(Op::GlobalAvgPool, vec![cur]),
                LayerKind::Flatten => b.push(Op::Flatten, vec![cur]),
                LayerKind::BasicBlock {
                    in_ch,
                    out_ch,
                    stride,
                } => {
                    let input = cur;
                    let c1 = b.conv(&format!("{prefix}.conv1"), input, in_ch, out_ch, 3, stride, 1, false, true);
                    let n1 = b.batch_norm(&format!("{prefix}.bn1"), c1, out_ch);
                    let r1 = b.push(Op::Relu, vec![n1]);
                    let c2 = b.conv(&format!("{prefix}.conv2"), r1, out_ch, out_ch, 3, 1, 1, false, true);
                    let n2 = b.batch_norm(&format!("{prefix}.bn2"), c2, out_ch);
                    let shortcut = if layer.block_has_projection() {
                        let d = b.conv(&format!("{prefix}.down"), input, in_ch, out_ch, 1, stride, 0, false, true);
                        b.batch_norm(&format!("{prefix}.down_bn"), d, out_ch)
                    } else {
                        input
                    };
                    let sum = b.push(Op::Add, vec![n2, shortcut]);
                    b.push(Op::Relu, vec![sum])
                }
            };
        }
        let _ = cur;
        Ok(Model {
            spec: spec.clone(),
            params: b.params,
            bn_stats: b.bn_stats,
            nodes: b.nodes,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Indices of prunable parameters, in order.
    pub fn prunable_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].prunable).collect()
    }

    /// Current masks; parameters without one read as all-ones.
    pub fn masks(&self) -> SparsityMask {
        let idx = self.prunable_indices();
        let names = idx.iter().map(|&i| self.params[i].name.clone()).collect();
        let layers = idx
            .iter()
            .map(|&i| {
                let p = &self.params[i];
                p.mask.clone().unwrap_or_else(|| LayerMask::ones(p.value.len()))
            })
            .collect();
        SparsityMask::new(names, layers)
    }

    /// Installs masks on the prunable parameters and zeroes masked weights.
    pub fn set_masks(&mut self, masks: &SparsityMask) -> Result<()> {
        let idx = self.prunable_indices();
        if idx.len() != masks.layers.len() {
            return Err(Error::LengthMismatch(idx.len(), masks.layers.len()));
        }
        for (&i, m) in idx.iter().zip(&masks.layers) {
            if self.params[i].value.len() != m.len() {
                return Err(Error::LengthMismatch(self.params[i].value.len(), m.len()));
            }
        }
        for (&i, m) in idx.iter().zip(&masks.layers) {
            self.params[i].mask = Some(m.clone());
            self.params[i].apply_mask();
        }
        Ok(())
    }

    pub fn clear_masks(&mut self) {
        self.params.iter_mut().for_each(|p| p.mask = None);
    }

    /// Prunable weight tensors in order (values, not effective values).
    pub fn prunable_values(&self) -> Vec<&[T]> {
        self.params
            .iter()
            .filter(|p| p.prunable)
            .map(|p| p.value.data())
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill(T::zero()));
    }

    /// Converts to another element type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    mask: p.mask.clone(),
                    prunable: p.prunable,
                })
                .collect(),
            bn_stats: self
                .bn_stats
                .iter()
                .map(|s| BnStats {
                    mean: s.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                    var: s.var.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
            nodes: self.nodes.clone(),
        }
    }
}
