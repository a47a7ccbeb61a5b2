use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::conditioning::leaky_relu;
use crate::error::{Error, Result};
use crate::networks::layers::{BatchNorm, Conv, Pointwise};
use crate::params::ParamBuilder;

pub const DISCRIMINATOR_STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Output channels of the three stride-2 stages.
    pub channels: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256],
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != DISCRIMINATOR_STAGES || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "discriminator needs {DISCRIMINATOR_STAGES} positive channel counts, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv,
    bn: BatchNorm,
}

/// Patch discriminator: three (4x4 stride-2 conv -> BN -> leaky ReLU)
/// stages and a 1x1 convolution to a single-channel score map.
#[derive(Debug, Clone)]
pub struct Discriminator {
    stages: Vec<Stage>,
    head: Pointwise,
}

impl Discriminator {
    pub fn new(b: &mut ParamBuilder<'_>, config: &DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(DISCRIMINATOR_STAGES);
        let mut inputs = 1;
        for (k, &c) in config.channels.iter().enumerate() {
            let mut sb = b.push(&format!("stage{k}"));
            let conv = Conv::new(&mut sb.push("conv"), inputs, c, 4, 2)?;
            let bn = BatchNorm::new(&mut sb.push("bn"), c)?;
            stages.push(Stage { conv, bn });
            inputs = c;
        }
        let head = Pointwise::new(&mut b.push("head"), inputs, 1)?;
        Ok(Self { stages, head })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let min = 1 << DISCRIMINATOR_STAGES;
        if c != 1 {
            return Err(Error::Dimension(format!("discriminator expects 1 channel, got {c}")));
        }
        if h < min || w < min {
            return Err(Error::Dimension(format!(
                "discriminator input {h}x{w} smaller than {min}x{min}"
            )));
        }
        Ok(())
    }

    /// Training-mode pass: batch statistics, running averages updated.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut h = x.clone();
        for stage in &mut self.stages {
            h = leaky_relu(&stage.bn.forward_train(&stage.conv.forward(&h)?)?)?;
        }
        self.head.forward(&h)
    }

    /// Evaluation-mode pass using running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut h = x.clone();
        for stage in &self.stages {
            h = leaky_relu(&stage.bn.forward_eval(&stage.conv.forward(&h)?)?)?;
        }
        self.head.forward(&h)
    }

    /// Non-trainable state (running statistics), keyed by local name.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(k, s)| {
                [
                    (format!("stage{k}.bn.running_mean"), s.bn.running_mean.clone()),
                    (format!("stage{k}.bn.running_var"), s.bn.running_var.clone()),
                ]
            })
            .collect()
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        for (k, s) in self.stages.iter_mut().enumerate() {
            let slot = if name == format!("stage{k}.bn.running_mean") {
                &mut s.bn.running_mean
            } else if name == format!("stage{k}.bn.running_var") {
                &mut s.bn.running_var
            } else {
                continue;
            };
            if slot.dims() != value.dims() {
                return Err(Error::Dimension(format!(
                    "buffer {name}: shape {:?} != {:?}",
                    value.dims(),
                    slot.dims()
                )));
            }
            *slot = value;
            return Ok(());
        }
        Err(Error::Config(format!("unknown discriminator buffer {name}")))
    }
}
