//! Per-layer parameter and FLOPs accounting.
//!
//! A multiply-add counts as 2 FLOPs. Normalisation, activation, pooling and
//! residual additions are counted as 0.

use super::spec::{LayerKind, ModelSpec};
use crate::error::Result;

/// Cost of one [`LayerKind`] entry for a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCost {
    pub forward_flops: u64,
    pub params: usize,
    pub prunable: bool,
}

/// Fan description of a weight tensor, used by the ERK allocator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fan {
    Linear { fan_in: usize, fan_out: usize },
    Conv { in_ch: usize, out_ch: usize, kh: usize, kw: usize },
}

impl Fan {
    pub fn numel(&self) -> usize {
        match *self {
            Fan::Linear { fan_in, fan_out } => fan_in * fan_out,
            Fan::Conv { in_ch, out_ch, kh, kw } => in_ch * out_ch * kh * kw,
        }
    }

    /// Elements feeding one output unit.
    pub fn fan_in(&self) -> usize {
        match *self {
            Fan::Linear { fan_in, .. } => fan_in,
            Fan::Conv { in_ch, kh, kw, .. } => in_ch * kh * kw,
        }
    }
}

/// A conv or linear weight tensor in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightLayer {
    pub name: String,
    pub fan: Fan,
    /// Dense forward FLOPs per sample attributable to this weight.
    pub flops: u64,
    pub prunable: bool,
}

pub fn layer_flops(kind: &LayerKind, input: &[usize]) -> Result<u64> {
    let out = kind.output_shape(input)?;
    Ok(match *kind {
        LayerKind::Linear {
            in_features,
            out_features,
            ..
        } => 2 * (in_features * out_features) as u64,
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            ..
        } => 2 * (kernel * kernel * in_ch * out_ch * out[1] * out[2]) as u64,
        LayerKind::BasicBlock { .. } => block_weights("", kind, input)?
            .iter()
            .map(|w| w.flops)
            .sum(),
        _ => 0,
    })
}

pub fn layer_params(kind: &LayerKind) -> usize {
    match *kind {
        LayerKind::Linear {
            in_features,
            out_features,
            bias,
            ..
        } => in_features * out_features + if bias { out_features } else { 0 },
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            bias,
            ..
        } => kernel * kernel * in_ch * out_ch + if bias { out_ch } else { 0 },
        LayerKind::BatchNorm { channels } => 2 * channels,
        LayerKind::BasicBlock { in_ch, out_ch, .. } => {
            let mut n = 9 * in_ch * out_ch + 9 * out_ch * out_ch + 4 * out_ch;
            if kind.block_has_projection() {
                n += in_ch * out_ch + 2 * out_ch;
            }
            n
        }
        _ => 0,
    }
}

pub fn layer_costs(spec: &ModelSpec) -> Result<Vec<LayerCost>> {
    let shapes = spec.shapes()?;
    spec.layers
        .iter()
        .zip(&shapes)
        .map(|(layer, input)| {
            Ok(LayerCost {
                forward_flops: layer_flops(layer, input)?,
                params: layer_params(layer),
                prunable: match *layer {
                    LayerKind::Conv2d { prunable, .. } | LayerKind::Linear { prunable, .. } => {
                        prunable
                    }
                    LayerKind::BasicBlock { .. } => true,
                    _ => false,
                },
            })
        })
        .collect()
}

/// Every conv/linear weight tensor in the order the model builder creates
/// them.
pub fn weight_layers(spec: &ModelSpec) -> Result<Vec<WeightLayer>> {
    let shapes = spec.shapes()?;
    let mut out = Vec::new();
    for (i, (layer, input)) in spec.layers.iter().zip(&shapes).enumerate() {
        let prefix = format!("l{i}");
        match *layer {
            LayerKind::Linear {
                in_features,
                out_features,
                prunable,
                ..
            } => out.push(WeightLayer {
                name: format!("{prefix}.weight"),
                fan: Fan::Linear {
                    fan_in: in_features,
                    fan_out: out_features,
                },
                flops: layer_flops(layer, input)?,
                prunable,
            }),
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                prunable,
                ..
            } => out.push(WeightLayer {
                name: format!("{prefix}.weight"),
                fan: Fan::Conv {
                    in_ch,
                    out_ch,
                    kh: kernel,
                    kw: kernel,
                },
                flops: layer_flops(layer, input)?,
                prunable,
            }),
            LayerKind::BasicBlock { .. } => out.extend(block_weights(&prefix, layer, input)?),
            _ => {}
        }
    }
    Ok(out)
}

fn block_weights(prefix: &str, kind: &LayerKind, input: &[usize]) -> Result<Vec<WeightLayer>> {
    let LayerKind::BasicBlock {
        in_ch,
        out_ch,
        stride,
    } = *kind
    else {
        return Ok(Vec::new());
    };
    let conv1 = LayerKind::conv(in_ch, out_ch, 3, stride, 1);
    let mid = conv1.output_shape(input)?;
    let conv2 = LayerKind::conv(out_ch, out_ch, 3, 1, 1);
    let mut out = vec![
        WeightLayer {
            name: format!("{prefix}.conv1.weight"),
            fan: Fan::Conv {
                in_ch,
                out_ch,
                kh: 3,
                kw: 3,
            },
            flops: layer_flops(&conv1, input)?,
            prunable: true,
        },
        WeightLayer {
            name: format!("{prefix}.conv2.weight"),
            fan: Fan::Conv {
                in_ch: out_ch,
                out_ch,
                kh: 3,
                kw: 3,
            },
            flops: layer_flops(&conv2, &mid)?,
            prunable: true,
        },
    ];
    if kind.block_has_projection() {
        let down = LayerKind::conv(in_ch, out_ch, 1, stride, 0);
        out.push(WeightLayer {
            name: format!("{prefix}.down.weight"),
            fan: Fan::Conv {
                in_ch,
                out_ch,
                kh: 1,
                kw: 1,
            },
            flops: layer_flops(&down, input)?,
            prunable: true,
        });
    }
    Ok(out)
}

pub fn total_params(spec: &ModelSpec) -> usize {
    spec.layers.iter().map(layer_params).sum()
}

/// Conv/linear weights marked prunable.
pub fn prunable_params(spec: &ModelSpec) -> Result<usize> {
    Ok(weight_layers(spec)?
        .iter()
        .filter(|w| w.prunable)
        .map(|w| w.fan.numel())
        .sum())
}

/// Dense forward FLOPs per sample.
pub fn forward_flops(spec: &ModelSpec) -> Result<u64> {
    Ok(layer_costs(spec)?.iter().map(|c| c.forward_flops).sum())
}
