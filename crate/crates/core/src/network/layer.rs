use crate::error::{Error, Result};
use crate::ops::batchnorm::{RunningStats, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::ops::conv::output_hw;
use crate::ops::init::kaiming_uniform;
use crate::ops::pool::pool_output_hw;
use crate::quant::{quantize_weights, QuantConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::spike::HoyerSpikeState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
    /// Weight quantization applied in the forward pass (master weights stay
    /// full precision).
    pub quant: Option<QuantConfig>,
}

impl<T: Scalar> Conv<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut Rng) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        Ok(Conv {
            weight: kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng)?,
            bias: Tensor::zeros([out_ch]),
            stride,
            pad,
            quant: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Weights the forward pass computes with.
    pub fn effective_weight(&self) -> Result<Option<Tensor<T>>> {
        match self.quant {
            Some(q) => Ok(Some(quantize_weights(&self.weight, q.bits)?.0)),
            None => Ok(None),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = *input else {
            return Err(Error::shape(format!("conv expects [C,H,W] per sample, got {input:?}")));
        };
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let (oh, ow) = output_hw(h, w, self.kernel(), self.stride, self.pad)?;
        Ok(vec![self.out_channels(), oh, ow])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Linear {
            weight: kaiming_uniform(&[fan_out, fan_in], fan_in, rng)?,
            bias: Tensor::zeros([fan_out]),
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: RunningStats<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full([channels], T::one()),
            beta: Tensor::zeros([channels]),
            running: RunningStats::new(channels),
            momentum: T::lit(DEFAULT_MOMENTUM),
            eps: T::lit(DEFAULT_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(Conv<T>),
    Linear(Linear<T>),
    BatchNorm(BatchNorm<T>),
    MaxPool { kernel: usize, stride: usize },
    Spike(HoyerSpikeState<T>),
    Flatten,
    Dropout { rate: T },
}

impl<T: Scalar> Layer<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Linear(_) => "linear",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Spike(_) => "hoyer_spike",
            Layer::Flatten => "flatten",
            Layer::Dropout { .. } => "dropout",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            Layer::Conv(_) | Layer::Linear(_) | Layer::BatchNorm(_) | Layer::Spike(_)
        )
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv(c) => c.output_shape(input),
            Layer::Linear(l) => match input {
                [f] if *f == l.fan_in() => Ok(vec![l.fan_out()]),
                _ => Err(Error::shape(format!(
                    "linear expects [{}] per sample, got {input:?}",
                    l.fan_in()
                ))),
            },
            Layer::BatchNorm(bn) => match input.first() {
                Some(&c) if c == bn.channels() => Ok(input.to_vec()),
                _ => Err(Error::shape(format!(
                    "batch norm over {} channels got {input:?}",
                    bn.channels()
                ))),
            },
            Layer::MaxPool { kernel, stride } => match *input {
                [c, h, w] => {
                    let (oh, ow) = pool_output_hw(h, w, *kernel, *stride)?;
                    Ok(vec![c, oh, ow])
                }
                _ => Err(Error::shape(format!("maxpool expects [C,H,W], got {input:?}"))),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Spike(_) | Layer::Dropout { .. } => Ok(input.to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shortcut<T> {
    /// Layer whose output is added.
    pub from: usize,
    /// Layer whose output receives the sum.
    pub to: usize,
    /// 1×1 projection used when shapes differ.
    pub projection: Option<Conv<T>>,
}
