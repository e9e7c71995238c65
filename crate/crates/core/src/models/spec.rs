//! Declarative model descriptions and a small family of desk-scale
//! architectures.

use crate::error::{Error, Result};

/// One entry of a [`ModelSpec`]. `BasicBlock` expands to two 3×3 convs with
/// batch-norm and a shortcut (identity, or 1×1 conv + batch-norm when the
/// shape changes), summed and passed through ReLU.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        prunable: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
        prunable: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    AvgPool {
        kernel: usize,
    },
    GlobalAvgPool,
    Flatten,
    BasicBlock {
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    },
}

impl LayerKind {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            bias: false,
            prunable: true,
        }
    }

    pub fn linear(in_features: usize, out_features: usize, bias: bool) -> Self {
        LayerKind::Linear {
            in_features,
            out_features,
            bias,
            prunable: true,
        }
    }

    /// Shape after this layer for a single sample (`[C,H,W]` or `[D]`).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: String| Err(Error::InvalidSpec(why));
        match *self {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (c, h, w) = image_dims(input, "conv2d")?;
                if c != in_ch {
                    return bad(format!("conv2d expects {in_ch} channels, got {c}"));
                }
                if kernel == 0 || stride == 0 {
                    return bad("conv2d kernel and stride must be positive".into());
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return bad(format!("conv2d kernel {kernel} larger than padded input {h}x{w}"));
                }
                let ho = (h + 2 * padding - kernel) / stride + 1;
                let wo = (w + 2 * padding - kernel) / stride + 1;
                Ok(vec![out_ch, ho, wo])
            }
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            } => {
                if input.len() != 1 || input[0] != in_features {
                    return bad(format!("linear expects [{in_features}], got {input:?}"));
                }
                Ok(vec![out_features])
            }
            LayerKind::BatchNorm { channels } => {
                if input.first() != Some(&channels) {
                    return bad(format!("batch-norm expects {channels} channels, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::AvgPool { kernel } => {
                let (c, h, w) = image_dims(input, "avgpool")?;
                if kernel == 0 || h < kernel || w < kernel {
                    return bad(format!("avgpool kernel {kernel} does not fit {h}x{w}"));
                }
                Ok(vec![c, h / kernel, w / kernel])
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = image_dims(input, "global-avgpool")?;
                Ok(vec![c])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::BasicBlock {
                in_ch,
                out_ch,
                stride,
            } => {
                let (c, h, w) = image_dims(input, "basic-block")?;
                if c != in_ch {
                    return bad(format!("basic block expects {in_ch} channels, got {c}"));
                }
                if stride == 0 {
                    return bad("basic block stride must be positive".into());
                }
                Ok(vec![out_ch, (h - 1) / stride + 1, (w - 1) / stride + 1])
            }
        }
    }

    /// Whether the block needs a projection shortcut.
    pub fn block_has_projection(&self) -> bool {
        matches!(*self, LayerKind::BasicBlock { in_ch, out_ch, stride } if in_ch != out_ch || stride != 1)
    }
}

fn image_dims(input: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match input {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::InvalidSpec(format!(
            "{op} expects a [C,H,W] input, got {input:?}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Per-sample input shape: `[C,H,W]` for images, `[D]` for vectors.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerKind>,
    /// Factor the widths were scaled by relative to the reference spec.
    pub width_multiplier: f64,
}

impl ModelSpec {
    pub fn new(input_shape: &[usize], classes: usize, layers: Vec<LayerKind>) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            classes,
            layers,
            width_multiplier: 1.0,
        }
    }

    /// Checks consecutive shapes and returns the per-sample shape entering each
    /// layer, followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "zero-sized input shape {:?}",
                self.input_shape
            )));
        }
        if self.classes == 0 {
            return Err(Error::InvalidSpec("class count must be positive".into()));
        }
        if !self.width_multiplier.is_finite() || self.width_multiplier <= 0.0 {
            return Err(Error::InvalidSpec("width multiplier must be positive and finite".into()));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            check_layer_sizes(layer)?;
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        let out = shapes.last().expect("non-empty");
        if out.as_slice() != [self.classes] {
            return Err(Error::InvalidSpec(format!(
                "model output {out:?} does not match {} classes",
                self.classes
            )));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Multi-layer perceptron on flat inputs.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(LayerKind::linear(prev, h, true));
            layers.push(LayerKind::Relu);
            prev = h;
        }
        layers.push(LayerKind::linear(prev, classes, true));
        Self::new(&[input_dim], classes, layers)
    }

    /// Plain ConvNet: per stage conv3×3 → BN → ReLU → 2×2 avg-pool, then
    /// global pooling and a linear classifier.
    pub fn convnet(input: [usize; 3], widths: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = input[0];
        for &w in widths {
            layers.push(LayerKind::conv(prev, w, 3, 1, 1));
            layers.push(LayerKind::BatchNorm { channels: w });
            layers.push(LayerKind::Relu);
            layers.push(LayerKind::AvgPool { kernel: 2 });
            prev = w;
        }
        layers.push(LayerKind::GlobalAvgPool);
        layers.push(LayerKind::linear(prev, classes, true));
        Self::new(&input, classes, layers)
    }

    /// Three-stage ResNet with `blocks_per_stage` basic blocks per stage
    /// (1 → ResNet-8, 2 → ResNet-14, 3 → ResNet-20).
    pub fn resnet(input: [usize; 3], blocks_per_stage: usize, base_width: usize, classes: usize) -> Self {
        let mut layers = vec![
            LayerKind::conv(input[0], base_width, 3, 1, 1),
            LayerKind::BatchNorm {
                channels: base_width,
            },
            LayerKind::Relu,
        ];
        let mut prev = base_width;
        for stage in 0..3 {
            let width = base_width << stage;
            for b in 0..blocks_per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                layers.push(LayerKind::BasicBlock {
                    in_ch: prev,
                    out_ch: width,
                    stride,
                });
                prev = width;
            }
        }
        layers.push(LayerKind::GlobalAvgPool);
        layers.push(LayerKind::linear(prev, classes, true));
        Self::new(&input, classes, layers)
    }

    /// Four-conv VGG-style network.
    pub fn mini_vgg(input: [usize; 3], base_width: usize, classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = input[0];
        for (i, &w) in [base_width, base_width, 2 * base_width, 2 * base_width]
            .iter()
            .enumerate()
        {
            layers.push(LayerKind::conv(prev, w, 3, 1, 1));
            layers.push(LayerKind::BatchNorm { channels: w });
            layers.push(LayerKind::Relu);
            if i % 2 == 1 {
                layers.push(LayerKind::AvgPool { kernel: 2 });
            }
            prev = w;
        }
        layers.push(LayerKind::GlobalAvgPool);
        layers.push(LayerKind::linear(prev, classes, true));
        Self::new(&input, classes, layers)
    }

    /// Stable textual form, used for hashing and in checkpoints.
    pub fn canonical(&self) -> String {
        let mut s = format!(
            "input={:?};classes={};width={:e};",
            self.input_shape, self.classes, self.width_multiplier
        );
        for l in &self.layers {
            s.push_str(&format!("{l:?};"));
        }
        s
    }
}

fn check_layer_sizes(layer: &LayerKind) -> Result<()> {
    let zero = match *layer {
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            ..
        } => in_ch == 0 || out_ch == 0 || kernel == 0,
        LayerKind::Linear {
            in_features,
            out_features,
            ..
        } => in_features == 0 || out_features == 0,
        LayerKind::BatchNorm { channels } => channels == 0,
        LayerKind::BasicBlock { in_ch, out_ch, .. } => in_ch == 0 || out_ch == 0,
        _ => false,
    };
    if zero {
        Err(Error::InvalidSpec(format!("zero-sized layer dimension in {layer:?}")))
    } else {
        Ok(())
    }
}
