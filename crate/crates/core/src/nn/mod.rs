//! A small reverse-mode layer set: 1-D convolution, dense, layer norm,
//! dropout, global max pooling, cross-entropy losses and Adam. Everything is
//! double precision.

pub mod archive;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

use rand::Rng;

pub use archive::{Archive, ArchiveEntry};
pub use layers::*;
pub use loss::{bce_with_logits, ce_loss};
pub use optim::{adam_step, AdamState, Parameter};
pub use tensor::Tensor;

use crate::error::Result;

/// Convolution layer owning its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Conv1d {
            weight: Parameter::kaiming_uniform(&[out_ch, in_ch, kernel], in_ch * kernel, rng),
            bias: Parameter::zeros(&[out_ch]),
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv1d_forward(x, &self.weight.value, &self.bias.value, self.stride)
    }

    /// Returns `(dx, [dw, db])`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, [Tensor; 2])> {
        let g = conv1d_backward(x, &self.weight.value, self.stride, dy)?;
        Ok((g.dx, [g.dw, g.db]))
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer, `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Dense {
            weight: Parameter::kaiming_uniform(&[fan_out, fan_in], fan_in, rng),
            bias: Parameter::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        dense_forward(x, &self.weight.value, &self.bias.value)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, [Tensor; 2])> {
        let g = dense_backward(x, &self.weight.value, dy)?;
        Ok((g.dx, [g.dw, g.db]))
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Layer normalization over the feature axis with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl LayerNorm {
    pub fn new(features: usize) -> Self {
        LayerNorm {
            gamma: Parameter::new(Tensor::full(&[features], 1.0)),
            beta: Parameter::zeros(&[features]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        layer_norm_forward(x, &self.gamma.value, &self.beta.value, LAYER_NORM_EPS)
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Tensor) -> Result<(Tensor, [Tensor; 2])> {
        let (dx, dg, db) = layer_norm_backward(cache, &self.gamma.value, dy)?;
        Ok((dx, [dg, db]))
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}
