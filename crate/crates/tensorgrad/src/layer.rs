//! Layer descriptors and parameter initialization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    Deconv2d,
    BatchNorm2d,
    Prelu,
    Lstm,
    LayerNorm,
    Linear,
}

/// Time/frequency kernel of every (de)convolution in the network.
pub const FREQ_KERNEL: (usize, usize) = (1, 3);
/// Time/frequency stride of every (de)convolution in the network.
pub const FREQ_STRIDE: (usize, usize) = (1, 2);

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub output_padding: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub bidirectional: bool,
}

impl LayerSpec {
    fn base(kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            output_padding: (0, 0),
            in_channels,
            out_channels,
            hidden_size: 0,
            num_layers: 1,
            bidirectional: false,
        }
    }

    /// Kernel (1, 3), stride (1, 2), frequency padding 1: halves F.
    pub fn conv2d(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: FREQ_KERNEL,
            stride: FREQ_STRIDE,
            padding: (0, 1),
            ..Self::base(LayerKind::Conv2d, in_channels, out_channels)
        }
    }

    /// Kernel (1, 3), stride (1, 2), padding 1, output padding 1: doubles F.
    pub fn deconv2d(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: FREQ_KERNEL,
            stride: FREQ_STRIDE,
            padding: (0, 1),
            output_padding: (0, 1),
            ..Self::base(LayerKind::Deconv2d, in_channels, out_channels)
        }
    }

    pub fn batchnorm2d(channels: usize) -> Self {
        Self::base(LayerKind::BatchNorm2d, channels, channels)
    }

    pub fn prelu(channels: usize) -> Self {
        Self::base(LayerKind::Prelu, channels, channels)
    }

    pub fn layernorm(dim: usize) -> Self {
        Self::base(LayerKind::LayerNorm, dim, dim)
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        Self::base(LayerKind::Linear, in_features, out_features)
    }

    pub fn lstm(input: usize, hidden: usize, num_layers: usize, bidirectional: bool) -> Self {
        Self {
            hidden_size: hidden,
            num_layers,
            bidirectional,
            ..Self::base(
                LayerKind::Lstm,
                input,
                hidden * if bidirectional { 2 } else { 1 },
            )
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Conv2d | LayerKind::Deconv2d => {
                if self.kernel != FREQ_KERNEL || self.stride != FREQ_STRIDE {
                    return Err(Error::Config(format!(
                        "{:?} must use kernel {FREQ_KERNEL:?} and stride {FREQ_STRIDE:?}, got {:?}/{:?}",
                        self.kind, self.kernel, self.stride
                    )));
                }
                if self.padding.0 != 0 || self.output_padding.0 != 0 {
                    return Err(Error::Config("time axis takes no padding".into()));
                }
            }
            LayerKind::Lstm if self.hidden_size == 0 || self.num_layers == 0 => {
                return Err(Error::Config("lstm needs hidden_size and num_layers > 0".into()));
            }
            _ => {}
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("{:?} with zero channels", self.kind)));
        }
        Ok(())
    }

    /// Frequency size produced from an input of `f` bins.
    pub fn output_freq(&self, f: usize) -> Result<usize> {
        let (k, s, p, op) = (self.kernel.1, self.stride.1, self.padding.1, self.output_padding.1);
        match self.kind {
            LayerKind::Conv2d => {
                if f + 2 * p < k {
                    return Err(Error::Shape(format!("conv2d needs F >= {}, got {f}", k - 2 * p)));
                }
                Ok((f + 2 * p - k) / s + 1)
            }
            LayerKind::Deconv2d => {
                if f == 0 {
                    return Err(Error::Shape("deconv2d on empty input".into()));
                }
                Ok((f - 1) * s + k + op - 2 * p)
            }
            _ => Ok(f),
        }
    }

    /// Weight shape (PyTorch layout) for conv/deconv/linear layers.
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv2d => vec![self.out_channels, self.in_channels, self.kernel.0, self.kernel.1],
            LayerKind::Deconv2d => vec![self.in_channels, self.out_channels, self.kernel.0, self.kernel.1],
            LayerKind::Linear => vec![self.out_channels, self.in_channels],
            _ => vec![self.out_channels],
        }
    }

    /// Fan-in used for the uniform initialization bound.
    pub fn fan_in(&self) -> usize {
        let k = self.kernel.0 * self.kernel.1;
        match self.kind {
            LayerKind::Conv2d => self.in_channels * k,
            // Transposed convolutions take fan-in from weight dim 1.
            LayerKind::Deconv2d => self.out_channels * k,
            LayerKind::Lstm => self.hidden_size,
            _ => self.in_channels,
        }
    }
}

/// Uniform in `±sqrt(1 / fan_in)`.
pub fn init_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

pub const PRELU_INIT: f64 = 0.25;
pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;
