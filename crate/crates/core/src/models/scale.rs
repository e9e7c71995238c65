//! Width scaling for the Small Dense baseline.

use super::cost::prunable_params;
use super::spec::{LayerKind, ModelSpec};
use crate::error::{Error, Result};

/// Which widths a scaling factor applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WidthScope {
    /// Hidden widths only; input channels and class count stay fixed.
    #[default]
    Hidden,
    /// Every width, including the input channel count and the class count.
    All,
}

/// Round half up, at least one channel.
pub fn scaled_width(width: usize, factor: f64) -> usize {
    ((width as f64 * factor + 0.5).floor() as usize).max(1)
}

/// Multiplies every width in `scope` by `factor` and re-derives the dependent
/// input sizes.
pub fn scale_width(spec: &ModelSpec, factor: f64, scope: WidthScope) -> Result<ModelSpec> {
    if factor <= 0.0 || !factor.is_finite() {
        return Err(Error::InvalidArgument(format!("width factor {factor} must be positive")));
    }
    spec.validate()?;
    let all = scope == WidthScope::All;
    let mut input_shape = spec.input_shape.clone();
    if all {
        input_shape[0] = scaled_width(input_shape[0], factor);
    }
    let classes = if all {
        scaled_width(spec.classes, factor)
    } else {
        spec.classes
    };
    let last_linear = spec
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerKind::Linear { .. }));

    let mut shape = input_shape.clone();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let scaled = match layer.clone() {
            LayerKind::Conv2d {
                out_ch,
                kernel,
                stride,
                padding,
                bias,
                prunable,
                ..
            } => LayerKind::Conv2d {
                in_ch: shape[0],
                out_ch: scaled_width(out_ch, factor),
                kernel,
                stride,
                padding,
                bias,
                prunable,
            },
            LayerKind::Linear {
                out_features,
                bias,
                prunable,
                ..
            } => LayerKind::Linear {
                in_features: shape.iter().product(),
                out_features: if Some(i) == last_linear {
                    classes
                } else {
                    scaled_width(out_features, factor)
                },
                bias,
                prunable,
            },
            LayerKind::BatchNorm { .. } => LayerKind::BatchNorm { channels: shape[0] },
            LayerKind::BasicBlock { out_ch, stride, .. } => LayerKind::BasicBlock {
                in_ch: shape[0],
                out_ch: scaled_width(out_ch, factor),
                stride,
            },
            other => other,
        };
        shape = scaled.output_shape(&shape)?;
        layers.push(scaled);
    }
    let out = ModelSpec {
        input_shape,
        classes,
        layers,
        width_multiplier: spec.width_multiplier * factor,
    };
    out.validate()?;
    Ok(out)
}

/// Finds by bisection a common width factor whose prunable parameter count is
/// within `tolerance` (relative) of `fraction` × the original count.
pub fn scale_width_to_params_with(
    spec: &ModelSpec,
    fraction: f64,
    scope: WidthScope,
    tolerance: f64,
) -> Result<ModelSpec> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "parameter fraction {fraction} outside (0, 1]"
        )));
    }
    if fraction == 1.0 {
        spec.validate()?;
        return Ok(spec.clone());
    }
    let original = prunable_params(spec)? as f64;
    let target = fraction * original;
    let count = |f: f64| -> Result<f64> { Ok(prunable_params(&scale_width(spec, f, scope)?)? as f64) };

    // invariant: count(lo) < target <= count(hi)
    let mut lo = 1e-9;
    let mut hi = 1.0;
    if count(lo)? >= target {
        hi = lo;
    } else {
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if count(mid)? >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    let mut best = (hi, (count(hi)? - target).abs());
    if lo < hi {
        let below = (count(lo)? - target).abs();
        if below < best.1 {
            best = (lo, below);
        }
    }
    if best.1 > tolerance * target {
        return Err(Error::Unreachable(fraction));
    }
    scale_width(spec, best.0, scope)
}

pub fn scale_width_to_params(spec: &ModelSpec, fraction: f64, scope: WidthScope) -> Result<ModelSpec> {
    scale_width_to_params_with(spec, fraction, scope, 0.02)
}
