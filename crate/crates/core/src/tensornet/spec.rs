use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// Same-padded (`kernel / 2`) 2D convolution with bias.
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// 2x2 window, stride 2, floor on odd sizes.
    #[serde(rename = "maxpool2")]
    MaxPool2,
    Relu,
    Flatten,
    Dense {
        out_dim: usize,
    },
    GlobalAvgPool,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::MaxPool2 => "maxpool2",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
            Layer::GlobalAvgPool => "global_avg_pool",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv2d { .. } | Layer::Dense { .. })
    }
}

/// Per-sample activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }
}

/// Layer list plus the square input geometry it expects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    /// Activation shape after each layer (index 0 is the input).
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let mut cur = ActShape::Spatial {
            c: self.input_channels,
            h: self.input_size,
            w: self.input_size,
        };
        let mut out = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |why: &str| Error::ShapeMismatch(format!("layer {i} ({}): {why}", layer.name()));
            cur = match (*layer, cur) {
                (Layer::Conv2d { out_channels, kernel, stride }, ActShape::Spatial { h, w, .. }) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 || kernel % 2 == 0 {
                        return Err(err("needs positive channels/stride and an odd kernel"));
                    }
                    let pad = kernel / 2;
                    ActShape::Spatial {
                        c: out_channels,
                        h: (h + 2 * pad - kernel) / stride + 1,
                        w: (w + 2 * pad - kernel) / stride + 1,
                    }
                }
                (Layer::MaxPool2, ActShape::Spatial { c, h, w }) => {
                    if h < 2 || w < 2 {
                        return Err(err("input smaller than the pooling window"));
                    }
                    ActShape::Spatial { c, h: h / 2, w: w / 2 }
                }
                (Layer::GlobalAvgPool, ActShape::Spatial { c, .. }) => ActShape::Flat(c),
                (Layer::Flatten, s) => ActShape::Flat(s.numel()),
                (Layer::Relu, s) => s,
                (Layer::Dense { out_dim }, ActShape::Flat(_)) if out_dim > 0 => ActShape::Flat(out_dim),
                _ => return Err(err("incompatible with its input shape")),
            };
            out.push(cur);
        }
        Ok(out)
    }

    pub fn output_dim(&self) -> Result<usize> {
        Ok(self.shapes()?.last().map(ActShape::numel).unwrap_or(0))
    }

    /// Shapes of every parameter tensor, weights then bias, in layer order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.shapes()?;
        let mut out = Vec::new();
        for (layer, input) in self.layers.iter().zip(&shapes) {
            match *layer {
                Layer::Conv2d { out_channels, kernel, .. } => {
                    let ActShape::Spatial { c, .. } = *input else { unreachable!() };
                    out.push(vec![out_channels, c, kernel, kernel]);
                    out.push(vec![out_channels]);
                }
                Layer::Dense { out_dim } => {
                    out.push(vec![out_dim, input.numel()]);
                    out.push(vec![out_dim]);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum())
    }
}

fn conv_block(out_channels: usize) -> [Layer; 3] {
    [
        Layer::Conv2d {
            out_channels,
            kernel: 3,
            stride: 1,
        },
        Layer::Relu,
        Layer::MaxPool2,
    ]
}

/// Embedding network: four conv blocks (8, 16, 32, 64 channels), global
/// average pooling, then `dense(128) -> relu -> dense(embed_dim)`.
pub fn default_embed_net(input_size: usize, embed_dim: usize) -> Result<NetworkSpec> {
    if input_size != 64 && input_size != 128 {
        return Err(Error::UnsupportedInputSize(input_size));
    }
    if embed_dim == 0 {
        return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
    }
    let mut layers: Vec<Layer> = [8, 16, 32, 64].into_iter().flat_map(conv_block).collect();
    layers.extend([
        Layer::GlobalAvgPool,
        Layer::Dense { out_dim: 128 },
        Layer::Relu,
        Layer::Dense { out_dim: embed_dim },
    ]);
    Ok(NetworkSpec {
        input_channels: 1,
        input_size,
        layers,
    })
}

/// Affine regression network on a 2-channel (moving, fixed) input: seven
/// conv blocks down to 1x1, then `dense(256) -> relu -> dense(6)`.
pub fn default_regression_net(input_size: usize) -> Result<NetworkSpec> {
    if input_size != 128 {
        return Err(Error::UnsupportedInputSize(input_size));
    }
    let mut layers: Vec<Layer> = [8, 16, 32, 32, 64, 64, 64]
        .into_iter()
        .flat_map(conv_block)
        .collect();
    layers.extend([
        Layer::Flatten,
        Layer::Dense { out_dim: 256 },
        Layer::Relu,
        Layer::Dense { out_dim: 6 },
    ]);
    Ok(NetworkSpec {
        input_channels: 2,
        input_size,
        layers,
    })
}
