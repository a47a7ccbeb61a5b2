//! Alternating min-max optimisation over pooled multi-domain slice pairs.

mod checkpoint;
mod infer;

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, TensorEntry,
    CHECKPOINT_SCHEMA_VERSION,
};
pub use infer::{correct_slices, infer, slices_to_tensor};

use crate::conditioning::MappingLabel;
use crate::data::{Dataset, DomainSpec, SlicePair, Split};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_losses, cycle_loss, domain_weights, scalar, weighted_ls_loss, DomainWeights,
    GanConvention, LossBreakdown, WlsReduction,
};
use crate::networks::{Conditioning, CycleModel, DiscriminatorConfig, GeneratorConfig};

/// Objective variant, mirroring the ablation rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// adv + ls, single domain.
    M1,
    /// adv + ls + cycle, single domain.
    M2,
    /// adv + wls, multi-domain.
    M3,
    /// adv + wls + cycle, multi-domain.
    M4,
    /// adv + wls + cycle, multi-domain, label-conditioned.
    #[default]
    Proposed,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [Self::M1, Self::M2, Self::M3, Self::M4, Self::Proposed];

    pub fn uses_cycle(self) -> bool {
        matches!(self, Self::M2 | Self::M4 | Self::Proposed)
    }

    pub fn multi_domain(self) -> bool {
        matches!(self, Self::M3 | Self::M4 | Self::Proposed)
    }

    pub fn label_conditioned(self) -> bool {
        self == Self::Proposed
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::M1 => "m1",
            Self::M2 => "m2",
            Self::M3 => "m3",
            Self::M4 => "m4",
            Self::Proposed => "proposed",
        }
    }

    /// Loss composition as written in the ablation tables.
    pub fn description(self) -> &'static str {
        match self {
            Self::M1 => "adv+ls",
            Self::M2 => "adv+ls+cycle",
            Self::M3 => "adv+wls",
            Self::M4 => "adv+wls+cycle",
            Self::Proposed => "adv+wls+cycle+label",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (expected m1, m2, m3, m4 or proposed)")))
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Reference intensity the networks' inputs and targets are divided by.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityNorm {
    /// Maximum standard-scan voxel of the kept training slices.
    Max,
    /// Mean standard-scan voxel of the kept training slices.
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Cycle-consistency weight.
    pub lambda1: f64,
    /// Supervised (weighted) least-squares weight.
    pub lambda2: f64,
    pub init_std: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub gan_convention: GanConvention,
    pub wls_reduction: WlsReduction,
    /// Training slices whose mean standard-scan intensity is below this
    /// fraction of their volume maximum are skipped.
    pub air_threshold: f64,
    pub intensity_norm: IntensityNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            batch_size: 32,
            lambda1: 10.0,
            lambda2: 10.0,
            init_std: 0.01,
            seed: 0,
            mode: TrainMode::Proposed,
            gan_convention: GanConvention::Standard,
            wls_reduction: WlsReduction::ScaledResidual,
            air_threshold: 0.01,
            intensity_norm: IntensityNorm::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("init_std", self.init_std),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.air_threshold) {
            return Err(Error::Config("air_threshold must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    /// Small networks for desk-scale experiments: two stages of 8/16 channels.
    pub fn toy(domain_count: usize) -> Self {
        Self {
            generator: GeneratorConfig {
                stages: 2,
                channels: vec![8, 16],
                domain_count,
                mapping_hidden: 32,
                ..Default::default()
            },
            discriminator: DiscriminatorConfig {
                channels: vec![8, 16, 32],
            },
        }
    }

    /// The generator configuration a mode actually trains.
    pub fn for_mode(&self, mode: TrainMode, domain_count: usize) -> Self {
        let mut m = self.clone();
        m.generator.domain_count = domain_count;
        m.generator.conditioning = if mode.label_conditioned() {
            Conditioning::Label
        } else {
            Conditioning::Affine
        };
        m
    }
}

/// Per-domain slice pairs; `pairs[i]` belongs to `domains[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub domains: Vec<DomainSpec>,
    pub pairs: Vec<Vec<SlicePair>>,
}

impl TrainingData {
    pub fn from_dataset(dataset: &Dataset, split: Split) -> Self {
        Self {
            domains: dataset.config.domains.clone(),
            pairs: dataset.domain_pairs(Some(split)),
        }
    }

    /// Keeps every domain's description (so labels keep their length) but
    /// only the pairs of `domain`.
    pub fn only_domain(&self, domain: usize) -> Result<Self> {
        if domain >= self.domains.len() {
            return Err(Error::Validation(format!(
                "domain {domain} out of range for {} domains",
                self.domains.len()
            )));
        }
        let pairs = (0..self.domains.len())
            .map(|d| if d == domain { self.pairs[d].clone() } else { Vec::new() })
            .collect();
        Ok(Self {
            domains: self.domains.clone(),
            pairs,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.pairs.iter().map(Vec::len).collect()
    }

    fn validate(&self, mode: TrainMode) -> Result<()> {
        let n = self.domains.len();
        if n == 0 || self.pairs.len() != n {
            return Err(Error::Validation(format!(
                "{} domain descriptions for {} pair collections",
                n,
                self.pairs.len()
            )));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.index != i {
                return Err(Error::Validation(format!(
                    "domain {} sits at position {i}; domains must be ordered by index",
                    d.index
                )));
            }
            d.validate(n)?;
        }
        let populated = self.pairs.iter().filter(|p| !p.is_empty()).count();
        if populated == 0 {
            return Err(Error::Validation("training data is empty".into()));
        }
        if mode.multi_domain() {
            if populated != n {
                return Err(Error::Validation(format!(
                    "mode {mode} needs pairs in every domain, got sizes {:?}",
                    self.sizes()
                )));
            }
            if mode.label_conditioned() && n < 2 {
                return Err(Error::Validation(format!(
                    "mode {mode} needs at least 2 domains, got {n}"
                )));
            }
        } else if populated != 1 {
            return Err(Error::Validation(format!(
                "mode {mode} is single-domain but the data has {populated} populated domains; \
                 select one domain (e.g. --domain 0) or use m3, m4 or proposed"
            )));
        }
        Ok(())
    }
}

/// One mini-batch on the model's device.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 1, H, W)` short-scan slices.
    pub z: Tensor,
    /// `(B, 1, H, W)` standard-scan slices.
    pub x: Tensor,
    /// `(B, N)` mapping labels.
    pub labels: Tensor,
    /// Per-sample domain weight.
    pub weights: Vec<f64>,
}

/// Scalar tensors of the generator-side objective.
#[derive(Debug, Clone)]
pub struct GeneratorTerms {
    pub adv: Tensor,
    pub cyc: Tensor,
    pub wls: Tensor,
    pub total: Tensor,
}

/// Discriminator term on detached fakes.
pub fn discriminator_objective(
    model: &mut CycleModel,
    batch: &Batch,
    gz: &Tensor,
    fx: &Tensor,
    convention: GanConvention,
) -> Result<Tensor> {
    let dx_real = model.dx.forward_train(&batch.x)?;
    let dx_fake = model.dx.forward_train(&gz.detach())?;
    let dz_real = model.dz.forward_train(&batch.z)?;
    let dz_fake = model.dz.forward_train(&fx.detach())?;
    Ok(adversarial_losses(&dx_real, &dx_fake, &dz_real, &dz_fake, convention)?.1)
}

/// `adv + lambda1 cyc + lambda2 wls` for the generator pair, given
/// `gz = G(z; c)` and `fx = F(x; c)`.
pub fn generator_objective(
    model: &mut CycleModel,
    batch: &Batch,
    gz: &Tensor,
    fx: &Tensor,
    config: &TrainConfig,
) -> Result<GeneratorTerms> {
    let dx_fake = model.dx.forward_train(gz)?;
    let dz_fake = model.dz.forward_train(fx)?;
    let (adv, _) = adversarial_losses(
        &dx_fake.detach(),
        &dx_fake,
        &dz_fake.detach(),
        &dz_fake,
        config.gan_convention,
    )?;
    let cyc = if config.mode.uses_cycle() {
        let z_cycled = model.f.forward(gz, &batch.labels)?;
        let x_cycled = model.g.forward(fx, &batch.labels)?;
        cycle_loss(&batch.z, &batch.x, &z_cycled, &x_cycled)?
    } else {
        Tensor::zeros((), gz.dtype(), gz.device())?
    };
    let wls = weighted_ls_loss(
        &(gz - &batch.x)?,
        &(fx - &batch.z)?,
        &batch.weights,
        config.wls_reduction,
    )?;
    let total = ((&adv + (&cyc * config.lambda1)?)? + (&wls * config.lambda2)?)?;
    Ok(GeneratorTerms { adv, cyc, wls, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Progress notifications from [`train`].
#[derive(Debug, Clone, Copy)]
pub enum TrainEvent<'a> {
    Batch(&'a BatchRecord),
    Epoch(&'a EpochRecord),
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
}

/// Parsed training pool held as device tensors.
struct Pool {
    z: Tensor,
    x: Tensor,
    labels: Tensor,
    weights: Vec<f64>,
    len: usize,
}

fn keep_pairs(pairs: &[SlicePair], air_threshold: f64) -> Vec<&SlicePair> {
    let mut subject_max: HashMap<&str, f32> = HashMap::new();
    for p in pairs {
        let m = p.x.iter().copied().fold(0.0f32, f32::max);
        let e = subject_max.entry(p.subject_id.as_str()).or_insert(0.0);
        *e = e.max(m);
    }
    pairs
        .iter()
        .filter(|p| {
            let mean = p.x.iter().map(|v| *v as f64).sum::<f64>() / p.x.len().max(1) as f64;
            mean >= air_threshold * subject_max[p.subject_id.as_str()] as f64
        })
        .collect()
}

fn build_pool(
    data: &TrainingData,
    config: &TrainConfig,
    divisor: usize,
    dtype: DType,
) -> Result<(Pool, f64)> {
    let n = data.domains.len();
    let kept: Vec<Vec<&SlicePair>> = data
        .pairs
        .iter()
        .map(|p| keep_pairs(p, config.air_threshold))
        .collect();
    let sizes: Vec<usize> = kept.iter().map(Vec::len).collect();
    let populated: Vec<usize> = (0..n).filter(|&i| !data.pairs[i].is_empty()).collect();
    if populated.iter().any(|&i| sizes[i] == 0) {
        return Err(Error::Validation(format!(
            "a domain has no slices above the air threshold (kept sizes {sizes:?})"
        )));
    }
    let weights: DomainWeights = if config.mode.multi_domain() {
        domain_weights(&sizes)?
    } else {
        DomainWeights::uniform_ones(n)
    };
    let all: Vec<&SlicePair> = kept.into_iter().flatten().collect();
    let (h, w) = all[0].z.dim();
    if let Some(p) = all.iter().find(|p| p.z.dim() != (h, w)) {
        return Err(Error::Dimension(format!(
            "training slices must share one shape: {:?} vs {:?} (subject {})",
            p.z.dim(),
            (h, w),
            p.subject_id
        )));
    }
    if h % divisor != 0 || w % divisor != 0 {
        return Err(Error::Dimension(format!(
            "training slices {h}x{w} are not divisible by {divisor}; pad at ingestion"
        )));
    }
    let voxels = || all.iter().flat_map(|p| p.x.iter()).copied();
    let scale = match config.intensity_norm {
        IntensityNorm::Max => voxels().fold(0.0f32, f32::max) as f64,
        IntensityNorm::Mean => {
            let (sum, n) = voxels().fold((0.0f64, 0usize), |(s, n), v| (s + v as f64, n + 1));
            sum / n.max(1) as f64
        }
    };
    if !(scale > 0.0) {
        return Err(Error::Validation("standard-scan slices are all zero".into()));
    }
    let zs: Vec<_> = all.iter().map(|p| &p.z).collect();
    let xs: Vec<_> = all.iter().map(|p| &p.x).collect();
    let z = slices_to_tensor(&zs, scale, dtype)?;
    let x = slices_to_tensor(&xs, scale, dtype)?;
    let mut lab = Vec::with_capacity(all.len() * n);
    for p in &all {
        lab.extend_from_slice(data.domains[p.domain_index].one_hot_label.as_slice());
    }
    let labels = Tensor::from_vec(lab, (all.len(), n), &Device::Cpu)?.to_dtype(dtype)?;
    let weights = weights.per_sample(&all.iter().map(|p| p.domain_index).collect::<Vec<_>>())?;
    Ok((
        Pool {
            z,
            x,
            labels,
            weights,
            len: all.len(),
        },
        scale,
    ))
}

impl Pool {
    fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let t = Tensor::from_vec(ids, idx.len(), &Device::Cpu)?;
        Ok(Batch {
            z: self.z.index_select(&t, 0)?,
            x: self.x.index_select(&t, 0)?,
            labels: self.labels.index_select(&t, 0)?,
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
        })
    }
}

fn adam(vars: Vec<candle_core::Var>, c: &TrainConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: 0.0,
        },
    )?)
}

fn check_finite(name: &'static str, v: f64, epoch: usize, batch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: name,
            epoch,
            batch,
        })
    }
}

/// Trains all four networks. One discriminator step then one generator step
/// per batch; batches are drawn uniformly from the pooled domains.
pub fn train(
    data: &TrainingData,
    model_config: &ModelConfig,
    config: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate(config.mode)?;
    let n = data.domains.len();
    let model_config = model_config.for_mode(config.mode, n);
    model_config.generator.validate()?;
    model_config.discriminator.validate()?;
    let dtype = DType::F32;
    let (pool, scale) = build_pool(data, config, model_config.generator.divisor(), dtype)?;
    let mut model = CycleModel::new(
        &model_config.generator,
        &model_config.discriminator,
        config.seed,
        config.init_std,
        dtype,
    )?;
    let mut opt_g = adam(model.generator_vars(), config)?;
    let mut opt_d = adam(model.discriminator_vars(), config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut batches = Vec::new();
    let mut order: Vec<usize> = (0..pool.len).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = pool.batch(idx)?;
            let gz = model.g.forward(&batch.z, &batch.labels)?;
            let fx = model.f.forward(&batch.x, &batch.labels)?;

            let loss_d = discriminator_objective(&mut model, &batch, &gz, &fx, config.gan_convention)?;
            let adv_d = scalar(&loss_d)?;
            check_finite("adv_d", adv_d, epoch, bi)?;
            opt_d.backward_step(&loss_d)?;

            let terms = generator_objective(&mut model, &batch, &gz, &fx, config)?;
            let loss = LossBreakdown::new(
                scalar(&terms.adv)?,
                adv_d,
                scalar(&terms.cyc)?,
                scalar(&terms.wls)?,
                config.lambda1,
                config.lambda2,
            );
            if let Some(term) = loss.first_non_finite() {
                return Err(Error::NonFinite { term, epoch, batch: bi });
            }
            opt_g.backward_step(&terms.total)?;

            let rec = BatchRecord { epoch, batch: bi, loss };
            observer(TrainEvent::Batch(&rec));
            batches.push(rec);
            epoch_losses.push(loss);
        }
        let rec = EpochRecord {
            epoch,
            loss: LossBreakdown::mean(&epoch_losses),
        };
        observer(TrainEvent::Epoch(&rec));
        epochs.push(rec);
    }
    let checkpoint = Checkpoint {
        train_config: config.clone(),
        model_config,
        domains: data.domains.clone(),
        model,
        epoch: config.epochs,
        intensity_scale: scale,
        rng,
    };
    Ok(TrainOutcome {
        checkpoint,
        epochs,
        batches,
    })
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    adv_g: f64,
    adv_d: f64,
    cyc: f64,
    wls: f64,
    total_g: f64,
    total_d: f64,
}

impl From<&EpochRecord> for LossRow {
    fn from(r: &EpochRecord) -> Self {
        let l = &r.loss;
        Self {
            epoch: r.epoch,
            adv_g: l.adv_g,
            adv_d: l.adv_d,
            cyc: l.cyc,
            wls: l.wls,
            total_g: l.total_g,
            total_d: l.total_d,
        }
    }
}

/// Per-epoch loss log with columns `epoch,adv_g,adv_d,cyc,wls,total_g,total_d`.
pub fn write_loss_csv(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in epochs {
        w.serialize(LossRow::from(r)).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct BatchRow {
    epoch: usize,
    batch: usize,
    adv_g: f64,
    adv_d: f64,
    cyc: f64,
    wls: f64,
    total_g: f64,
    total_d: f64,
}

/// Per-batch loss log; one row per optimisation step.
pub fn write_batch_csv(path: &Path, batches: &[BatchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in batches {
        let l = &r.loss;
        w.serialize(BatchRow {
            epoch: r.epoch,
            batch: r.batch,
            adv_g: l.adv_g,
            adv_d: l.adv_d,
            cyc: l.cyc,
            wls: l.wls,
            total_g: l.total_g,
            total_d: l.total_d,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// One-hot label of a training domain.
pub fn domain_label(checkpoint: &Checkpoint, domain: usize) -> Result<MappingLabel> {
    MappingLabel::one_hot(domain, checkpoint.domain_count())
}
