use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::conditioning::{adain, leaky_relu, MappingNetwork, SiteConditioning, DEFAULT_ADAIN_EPS};
use crate::error::{Error, Result};
use crate::networks::layers::{Conv, Pointwise};
use crate::params::ParamBuilder;
use crate::wavelet::{haar_decompose_tensor, haar_reconstruct_tensor, TensorSubbands};

pub const GENERATOR_KERNEL: usize = 4;

/// How AdaIN sites obtain their per-channel targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Mapping networks driven by the label.
    Label,
    /// Learned per-channel affine parameters; the label is ignored.
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub stages: usize,
    pub channels: Vec<usize>,
    pub domain_count: usize,
    #[serde(default = "default_mapping_hidden")]
    pub mapping_hidden: usize,
    #[serde(default = "default_conditioning")]
    pub conditioning: Conditioning,
    #[serde(default = "default_true")]
    pub residual: bool,
    #[serde(default = "default_eps")]
    pub adain_eps: f64,
}

fn default_mapping_hidden() -> usize {
    64
}
fn default_conditioning() -> Conditioning {
    Conditioning::Label
}
fn default_true() -> bool {
    true
}
fn default_eps() -> f64 {
    DEFAULT_ADAIN_EPS
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            channels: vec![64, 128, 256, 512],
            domain_count: 3,
            mapping_hidden: 64,
            conditioning: Conditioning::Label,
            residual: true,
            adain_eps: DEFAULT_ADAIN_EPS,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("generator needs at least one stage".into()));
        }
        if self.channels.len() != self.stages {
            return Err(Error::Config(format!(
                "{} channel counts given for {} stages",
                self.channels.len(),
                self.stages
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.domain_count == 0 {
            return Err(Error::Config(
                "channel counts and domain count must be positive".into(),
            ));
        }
        if !(self.adain_eps > 0.0) {
            return Err(Error::Config("adain_eps must be positive".into()));
        }
        Ok(())
    }

    /// Spatial dimensions must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.stages
    }
}

/// 4x4 convolution -> AdaIN -> leaky ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv,
    pub site: SiteConditioning,
}

impl ConvBlock {
    fn new(
        b: &mut ParamBuilder<'_>,
        cfg: &GeneratorConfig,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        let conv = Conv::new(&mut b.push("conv"), inputs, outputs, GENERATOR_KERNEL, 1)?;
        let site = match cfg.conditioning {
            Conditioning::Label => SiteConditioning::Mapping(MappingNetwork::new(
                &mut b.push("map"),
                cfg.domain_count,
                cfg.mapping_hidden,
                outputs,
            )?),
            Conditioning::Affine => SiteConditioning::affine(&mut b.push("affine"), outputs)?,
        };
        Ok(Self { conv, site })
    }

    fn forward(&self, x: &Tensor, labels: &Tensor, eps: f64) -> Result<Tensor> {
        let h = self.conv.forward(x)?;
        let stats = self.site.stats(labels)?;
        leaky_relu(&adain(&h, &stats, eps)?)
    }
}

#[derive(Debug, Clone)]
struct BlockPair([ConvBlock; 2]);

impl BlockPair {
    fn new(
        b: &mut ParamBuilder<'_>,
        cfg: &GeneratorConfig,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        let first = ConvBlock::new(&mut b.push("block0"), cfg, inputs, outputs)?;
        let second = ConvBlock::new(&mut b.push("block1"), cfg, outputs, outputs)?;
        Ok(Self([first, second]))
    }

    fn forward(&self, x: &Tensor, labels: &Tensor, eps: f64) -> Result<Tensor> {
        let h = self.0[0].forward(x, labels, eps)?;
        self.0[1].forward(&h, labels, eps)
    }
}

/// Framelet encoder-decoder conditioned on a mapping label.
///
/// Encoder stage `k` runs two conditioned conv blocks and a Haar
/// decomposition; the low-low band descends, the three high bands are held
/// for the decoder. Decoder stage `k` concatenates its input with the
/// encoder's low-low band of the same stage, applies two conditioned conv
/// blocks and Haar-reconstructs with the held high bands. A 1x1 convolution
/// maps to one output channel.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    encoder: Vec<BlockPair>,
    bottleneck: BlockPair,
    decoder: Vec<BlockPair>,
    head: Pointwise,
}

impl Generator {
    pub fn new(b: &mut ParamBuilder<'_>, config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let mut encoder = Vec::with_capacity(config.stages);
        let mut inputs = 1;
        for (k, &c) in ch.iter().enumerate() {
            encoder.push(BlockPair::new(&mut b.push(&format!("enc{k}")), config, inputs, c)?);
            inputs = c;
        }
        let deepest = *ch.last().unwrap();
        let bottleneck = BlockPair::new(&mut b.push("bottleneck"), config, deepest, deepest)?;
        let mut decoder = Vec::with_capacity(config.stages);
        for k in 0..config.stages {
            let incoming = if k + 1 == config.stages { deepest } else { ch[k + 1] };
            decoder.push(BlockPair::new(
                &mut b.push(&format!("dec{k}")),
                config,
                incoming + ch[k],
                ch[k],
            )?);
        }
        let head = Pointwise::new(&mut b.push("head"), ch[0], 1)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn check_input(&self, z: &Tensor, labels: &Tensor) -> Result<()> {
        let (b, c, h, w) = z.dims4()?;
        if c != 1 {
            return Err(Error::Dimension(format!("generator expects 1 channel, got {c}")));
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Dimension(format!(
                "spatial dims {h}x{w} not divisible by 2^{} = {d}",
                self.config.stages
            )));
        }
        let (lb, n) = labels.dims2()?;
        if n != self.config.domain_count {
            return Err(Error::Config(format!(
                "mapping label has length {n}, model expects {}",
                self.config.domain_count
            )));
        }
        if lb != b && lb != 1 {
            return Err(Error::Dimension(format!(
                "{lb} labels supplied for a batch of {b}"
            )));
        }
        Ok(())
    }

    /// `z` is `(B, 1, H, W)`, `labels` is `(B, N)` or `(1, N)`.
    pub fn forward(&self, z: &Tensor, labels: &Tensor) -> Result<Tensor> {
        self.check_input(z, labels)?;
        let eps = self.config.adain_eps;
        let mut x = z.clone();
        let mut held: Vec<TensorSubbands> = Vec::with_capacity(self.config.stages);
        for stage in &self.encoder {
            let e = stage.forward(&x, labels, eps)?;
            let bands = haar_decompose_tensor(&e)?;
            x = bands.ll.clone();
            held.push(bands);
        }
        let mut up = self.bottleneck.forward(&x, labels, eps)?;
        for (stage, bands) in self.decoder.iter().zip(held.iter()).rev() {
            let cat = Tensor::cat(&[&up, &bands.ll], 1)?;
            let low = stage.forward(&cat, labels, eps)?;
            up = haar_reconstruct_tensor(&TensorSubbands {
                ll: low,
                lh: bands.lh.clone(),
                hl: bands.hl.clone(),
                hh: bands.hh.clone(),
            })?;
        }
        let out = self.head.forward(&up)?;
        if self.config.residual {
            Ok((out + z)?)
        } else {
            Ok(out)
        }
    }

    fn blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoder.iter())
            .flat_map(|p| p.0.iter())
    }

    pub fn site_count(&self) -> usize {
        self.blocks().count()
    }

    /// Number of AdaIN sites whose targets depend on the label.
    pub fn label_dependent_sites(&self) -> usize {
        self.blocks().filter(|b| b.site.is_label_dependent()).count()
    }

    /// Parameters in convolutions and the head (excludes conditioning).
    pub fn conv_parameter_count(&self) -> usize {
        self.blocks().map(|b| b.conv.parameter_count()).sum::<usize>()
            + self.head.parameter_count()
    }

    pub fn conditioning_parameter_count(&self) -> usize {
        self.blocks().map(|b| b.site.parameter_count()).sum()
    }

    /// Output channel count of every AdaIN site, in forward order.
    pub fn site_channels(&self) -> Vec<usize> {
        self.blocks().map(|b| b.conv.weight.dims()[0]).collect()
    }

    /// Zeroes the 1x1 head. With the residual path this makes `G(z) = z`.
    pub fn zero_head(&self) -> Result<()> {
        let w = self.head.weight.zeros_like()?;
        self.head.weight.set(&w)?;
        let bias = self.head.bias.zeros_like()?;
        self.head.bias.set(&bias)?;
        Ok(())
    }

    pub fn head_variables(&self) -> [&Var; 2] {
        [&self.head.weight, &self.head.bias]
    }
}
