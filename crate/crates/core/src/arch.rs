//! Layer topologies shared by the integer engine and the float trainer.

use serde::{Deserialize, Serialize};

use crate::engine::ops::KERNEL;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Linear { out_features: usize },
    Conv2d { out_channels: usize },
    Relu,
    AvgPool2x2,
    SoftmaxScore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl Arch {
    /// 784-128-64-10 perceptron, no biases (MNIST).
    pub fn mlp() -> Self {
        Self::perceptron([1, 28, 28], &[128, 64, 10])
    }

    /// Three 5x5 conv blocks (32, 32, 64 channels) with 2x2 average pooling,
    /// then a 10-way linear layer, no biases (CIFAR-10).
    pub fn cnn() -> Self {
        use LayerSpec::*;
        Self {
            input_shape: [3, 32, 32],
            layers: vec![
                Conv2d { out_channels: 32 },
                Relu,
                AvgPool2x2,
                Conv2d { out_channels: 32 },
                Relu,
                AvgPool2x2,
                Conv2d { out_channels: 64 },
                Relu,
                AvgPool2x2,
                Linear { out_features: 10 },
                SoftmaxScore,
            ],
        }
    }

    /// Fully-connected ReLU network over a flat input; the last width is the
    /// number of classes.
    pub fn perceptron(input_shape: [usize; 3], widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len() * 2);
        for (i, &w) in widths.iter().enumerate() {
            layers.push(LayerSpec::Linear { out_features: w });
            layers.push(if i + 1 == widths.len() {
                LayerSpec::SoftmaxScore
            } else {
                LayerSpec::Relu
            });
        }
        Self {
            input_shape,
            layers,
        }
    }

    /// Activation shape entering each layer, plus the final output shape.
    pub fn activation_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input_shape;
        if cur.contains(&0) {
            return Err(Error::validation(format!("empty input shape {cur:?}")));
        }
        shapes.push(cur);
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Linear { out_features } => [out_features, 1, 1],
                LayerSpec::Conv2d { out_channels } => {
                    if cur[1] == 1 && cur[2] == 1 && i > 0 {
                        return Err(Error::validation(format!(
                            "layer {i}: convolution after a flat activation"
                        )));
                    }
                    [out_channels, cur[1], cur[2]]
                }
                LayerSpec::Relu => cur,
                LayerSpec::AvgPool2x2 => {
                    if !cur[1].is_multiple_of(2) || !cur[2].is_multiple_of(2) {
                        return Err(Error::validation(format!(
                            "layer {i}: pooling over odd spatial dims {cur:?}"
                        )));
                    }
                    [cur[0], cur[1] / 2, cur[2] / 2]
                }
                LayerSpec::SoftmaxScore => {
                    if i + 1 != self.layers.len() {
                        return Err(Error::validation("softmax must be the last layer"));
                    }
                    if cur.iter().product::<usize>() < 2 {
                        return Err(Error::validation("softmax needs at least two labels"));
                    }
                    cur
                }
            };
            if cur.contains(&0) {
                return Err(Error::validation(format!("layer {i}: empty output shape")));
            }
            shapes.push(cur);
        }
        if self.layers.last() != Some(&LayerSpec::SoftmaxScore) {
            return Err(Error::validation("architecture must end with a softmax layer"));
        }
        Ok(shapes)
    }

    /// Weight tensor shapes of the weighted layers, in layer order.
    pub fn weight_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.activation_shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .filter_map(|(layer, input)| match *layer {
                LayerSpec::Linear { out_features } => {
                    Some(vec![out_features, input.iter().product()])
                }
                LayerSpec::Conv2d { out_channels } => {
                    Some(vec![out_channels, input[0], KERNEL, KERNEL])
                }
                _ => None,
            })
            .collect())
    }

    pub fn param_counts(&self) -> Result<Vec<usize>> {
        Ok(self
            .weight_shapes()?
            .iter()
            .map(|s| s.iter().product())
            .collect())
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.activation_shapes()?.last().map(|s| s.iter().product()).unwrap_or(0))
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}
