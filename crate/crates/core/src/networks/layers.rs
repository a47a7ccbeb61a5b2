use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::params::ParamBuilder;

/// TensorFlow-style "SAME" padding split for one axis.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (total / 2, total - total / 2)
}

/// Square convolution with "SAME" padding and no bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Var,
    kernel: usize,
    stride: usize,
}

impl Conv {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: b.gaussian("weight", &[outputs, inputs, kernel, kernel])?,
            kernel,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let (top, bottom) = same_padding(h, self.kernel, self.stride);
        let (left, right) = same_padding(w, self.kernel, self.stride);
        let mut padded = x.clone();
        if top + bottom > 0 {
            padded = padded.pad_with_zeros(2, top, bottom)?;
        }
        if left + right > 0 {
            padded = padded.pad_with_zeros(3, left, right)?;
        }
        Ok(padded.conv2d(self.weight.as_tensor(), 0, self.stride, 1, 1)?)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.elem_count()
    }
}

/// 1x1 convolution with bias.
#[derive(Debug, Clone)]
pub struct Pointwise {
    pub weight: Var,
    pub bias: Var,
}

impl Pointwise {
    pub fn new(b: &mut ParamBuilder<'_>, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            weight: b.gaussian("weight", &[outputs, inputs, 1, 1])?,
            bias: b.constant("bias", &[outputs], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), 0, 1, 1, 1)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.elem_count() + self.bias.elem_count()
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalisation with running statistics for evaluation mode.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub fn new(b: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        let gamma = b.constant("gamma", &[channels], 1.0)?;
        let beta = b.constant("beta", &[channels], 0.0)?;
        let running_mean = Tensor::zeros(channels, b.dtype(), b.device())?;
        let running_var = Tensor::ones(channels, b.dtype(), b.device())?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    fn affine(&self, normed: &Tensor, c: usize) -> Result<Tensor> {
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }

    /// Normalises with batch statistics and updates the running averages.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let c = x.dims4()?.1;
        let mean = x.mean_keepdim((0, 2, 3))?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
        let normed = centered.broadcast_div(&(&var + BN_EPS)?.sqrt()?)?;
        let batch_mean = mean.flatten_all()?.detach();
        let batch_var = var.flatten_all()?.detach();
        self.running_mean = ((&self.running_mean * (1.0 - BN_MOMENTUM))?
            + (batch_mean * BN_MOMENTUM)?)?;
        self.running_var = ((&self.running_var * (1.0 - BN_MOMENTUM))?
            + (batch_var * BN_MOMENTUM)?)?;
        self.affine(&normed, c)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dims4()?.1;
        let mean = self.running_mean.reshape((1, c, 1, 1))?;
        let std = (self.running_var.reshape((1, c, 1, 1))? + BN_EPS)?.sqrt()?;
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        self.affine(&normed, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_arithmetic() {
        assert_eq!(same_padding(32, 4, 1), (1, 2));
        assert_eq!(same_padding(8, 4, 2), (1, 1));
        assert_eq!(same_padding(9, 4, 2), (1, 2));
        assert_eq!(same_padding(5, 1, 1), (0, 0));
    }
}
