use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv2d_output_hw;

/// One layer of a declarative classifier description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fixed spatial window of a `C×H×W` input. Has no parameters and costs nothing.
    Crop {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    /// Valid convolution with square kernels, followed by a per-filter bias.
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    Relu,
    /// Fully connected layer; flattens its input.
    Dense {
        units: usize,
    },
}

fn one() -> usize {
    1
}

/// Named layer stack with a fixed input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub id: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Per-layer shapes resolved from an [`Architecture`].
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedLayer {
    pub spec: LayerSpec,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

impl LayerSpec {
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Crop {
                top,
                left,
                height,
                width,
            } => match input {
                [c, h, w] if height > 0 && width > 0 && top + height <= *h && left + width <= *w => {
                    Ok(vec![*c, height, width])
                }
                _ => Err(Error::Config(format!(
                    "crop {height}×{width} at ({top},{left}) does not fit input {input:?}"
                ))),
            },
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
            } => match input {
                [_, h, w] if filters > 0 => {
                    let (oh, ow) =
                        conv2d_output_hw(*h, *w, kernel, kernel, stride).map_err(|e| Error::Config(e.to_string()))?;
                    Ok(vec![filters, oh, ow])
                }
                _ => Err(Error::Config(format!("conv layer needs a C×H×W input, got {input:?}"))),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dense { units } if units > 0 => Ok(vec![units]),
            LayerSpec::Dense { .. } => Err(Error::Config("dense layer needs at least one unit".into())),
        }
    }

    /// FLOPs for one forward pass given the layer's input shape.
    ///
    /// A multiply-accumulate counts as two FLOPs; biases are not counted;
    /// ReLU costs one op per element; crops are free.
    pub fn flops(&self, input: &[usize], output: &[usize]) -> u64 {
        let numel = |s: &[usize]| s.iter().product::<usize>() as u64;
        match *self {
            LayerSpec::Crop { .. } => 0,
            LayerSpec::Conv { filters, kernel, .. } => {
                let channels = input[0] as u64;
                let positions = (output[1] * output[2]) as u64;
                2 * filters as u64 * channels * (kernel * kernel) as u64 * positions
            }
            LayerSpec::Relu => numel(output),
            LayerSpec::Dense { units } => 2 * units as u64 * numel(input),
        }
    }
}

impl Architecture {
    /// Resolves every layer's input and output shape.
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "model '{}': invalid input shape {:?}",
                self.id, self.input_shape
            )));
        }
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            let next = spec
                .output_shape(&shape)
                .map_err(|e| Error::Config(format!("model '{}': {e}", self.id)))?;
            out.push(ResolvedLayer {
                spec: spec.clone(),
                input: std::mem::replace(&mut shape, next.clone()),
                output: next,
            });
        }
        Ok(out)
    }

    /// Sum of per-layer FLOPs. An empty stack costs 0.
    pub fn flops(&self) -> Result<u64> {
        Ok(self.resolve()?.iter().map(|l| l.spec.flops(&l.input, &l.output)).sum())
    }
}
