use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::ops::conv_out_extent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

/// One link of a sequential network. Convolutions and dense layers are
/// purely affine; nonlinearities are separate [`LayerSpec::Activation`]
/// links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        padding: usize,
    },
    StridedConv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Fully connected. Any input shape is flattened; the output is a vector
    /// unless `reshape` gives a `C x H x W` view of it.
    Dense {
        units: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reshape: Option<[usize; 3]>,
    },
    MaxPool {
        window: usize,
    },
    Unpool2x,
    Dropout {
        p: f64,
    },
    Activation {
        function: Activation,
    },
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            filters,
            kernel,
            padding: kernel / 2,
        }
    }

    pub fn strided(filters: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::StridedConv {
            filters,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units, reshape: None }
    }

    pub fn relu() -> Self {
        LayerSpec::Activation {
            function: Activation::Relu,
        }
    }

    pub fn tanh() -> Self {
        LayerSpec::Activation {
            function: Activation::Tanh,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::StridedConv { .. } => "strided-conv",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Unpool2x => "unpool2x",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Activation { .. } => "activation",
        }
    }

    /// `(filters, kernel, stride, padding)` for both convolution kinds.
    pub(crate) fn conv_params(&self) -> Option<(usize, usize, usize, usize)> {
        match *self {
            LayerSpec::Conv {
                filters,
                kernel,
                padding,
            } => Some((filters, kernel, 1, padding)),
            LayerSpec::StridedConv {
                filters,
                kernel,
                stride,
                padding,
            } => Some((filters, kernel, stride, padding)),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| TensorError::InvalidSpec(format!("{} on input {input:?}: {why}", self.kind_name()));
        match self {
            LayerSpec::Conv { .. } | LayerSpec::StridedConv { .. } => {
                let (filters, kernel, stride, padding) = self.conv_params().unwrap();
                if input.len() != 3 {
                    return Err(bad("expects C x H x W"));
                }
                if filters == 0 || kernel == 0 || stride == 0 {
                    return Err(bad("zero-sized filter bank or stride"));
                }
                let oh = conv_out_extent(input[1], kernel, stride, padding).ok_or_else(|| bad("kernel larger than input"))?;
                let ow = conv_out_extent(input[2], kernel, stride, padding).ok_or_else(|| bad("kernel larger than input"))?;
                Ok(vec![filters, oh, ow])
            }
            LayerSpec::Dense { units, reshape } => {
                if *units == 0 {
                    return Err(bad("zero units"));
                }
                match reshape {
                    Some(r) if r.iter().product::<usize>() != *units => Err(bad("reshape does not match unit count")),
                    Some(r) => Ok(r.to_vec()),
                    None => Ok(vec![*units]),
                }
            }
            LayerSpec::MaxPool { window } => {
                if input.len() != 3 || *window == 0 || !input[1].is_multiple_of(*window) || !input[2].is_multiple_of(*window) {
                    return Err(bad("window must divide the spatial extents"));
                }
                Ok(vec![input[0], input[1] / window, input[2] / window])
            }
            LayerSpec::Unpool2x => {
                if input.len() != 3 {
                    return Err(bad("expects C x H x W"));
                }
                Ok(vec![input[0], input[1] * 2, input[2] * 2])
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(bad("drop probability must lie in [0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
        }
    }

    /// Shapes of the trainable tensors of this layer for a given input.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Conv { .. } | LayerSpec::StridedConv { .. } => {
                let (filters, kernel, _, _) = self.conv_params().unwrap();
                vec![vec![filters, input[0], kernel, kernel], vec![filters]]
            }
            LayerSpec::Dense { units, .. } => {
                vec![vec![*units, input.iter().product()], vec![*units]]
            }
            _ => Vec::new(),
        }
    }
}

/// Sequential architecture: per-sample input shape plus the layer chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Per-sample shapes at every link boundary (`layers.len() + 1` entries).
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for l in &self.layers {
            let next = l.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap())
    }
}
