//! Label conditioning: mapping networks that turn a mapping label into
//! per-channel AdaIN targets, and the AdaIN transform itself.

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamBuilder;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_ADAIN_EPS: f64 = 1e-5;

/// Conditioning vector `c`. One-hot for training domains, free for unseen ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MappingLabel(pub Vec<f64>);

impl MappingLabel {
    pub fn one_hot(index: usize, n: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::Config(format!(
                "one-hot index {index} out of range for {n} domains"
            )));
        }
        let mut v = vec![0.0; n];
        v[index] = 1.0;
        Ok(Self(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if self.0.len() != n {
            return Err(Error::Config(format!(
                "mapping label has length {}, model expects {n}",
                self.0.len()
            )));
        }
        Ok(())
    }

    /// `(batch, N)` tensor with this label repeated on every row.
    pub fn to_batch(&self, batch: usize, dtype: DType) -> Result<Tensor> {
        let n = self.0.len();
        let row = Tensor::from_slice(&self.0, (1, n), &candle_core::Device::Cpu)?;
        Ok(row.to_dtype(dtype)?.repeat((batch, 1))?)
    }
}

/// Per-sample AdaIN targets, each `(batch, J)`.
#[derive(Debug, Clone)]
pub struct AdaINStats {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl AdaINStats {
    pub fn channels(&self) -> usize {
        self.mu.dims().last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
struct Dense {
    weight: Var,
    bias: Var,
}

impl Dense {
    fn new(b: &mut ParamBuilder<'_>, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let mut b = b.push(name);
        Ok(Self {
            weight: b.gaussian("weight", &[outputs, inputs])?,
            bias: b.constant("bias", &[outputs], 0.0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Two hidden fully connected layers followed by a `2J` output layer whose
/// first `J` entries are the target means and the last `J` the target scales.
#[derive(Debug, Clone)]
pub struct MappingNetwork {
    hidden1: Dense,
    hidden2: Dense,
    output: Dense,
    domain_count: usize,
    channels: usize,
}

impl MappingNetwork {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        domain_count: usize,
        hidden: usize,
        channels: usize,
    ) -> Result<Self> {
        if domain_count == 0 || channels == 0 || hidden == 0 {
            return Err(Error::Config(
                "mapping network needs positive domain count, width and channel count".into(),
            ));
        }
        let hidden1 = Dense::new(b, "fc1", domain_count, hidden)?;
        let hidden2 = Dense::new(b, "fc2", hidden, hidden)?;
        let mut out_b = b.push("out");
        let weight = out_b.gaussian("weight", &[2 * channels, hidden])?;
        // sigma half of the bias starts at 1 so an untrained net passes features through
        let mut bias = vec![0.0; 2 * channels];
        bias[channels..].iter_mut().for_each(|v| *v = 1.0);
        let bias = out_b.from_values("bias", &[2 * channels], bias)?;
        Ok(Self {
            hidden1,
            hidden2,
            output: Dense { weight, bias },
            domain_count,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn domain_count(&self) -> usize {
        self.domain_count
    }

    pub fn output_dim(&self) -> usize {
        self.output.bias.dims()[0]
    }

    pub fn parameter_count(&self) -> usize {
        [&self.hidden1, &self.hidden2, &self.output]
            .iter()
            .map(|d| d.weight.elem_count() + d.bias.elem_count())
            .sum()
    }

    /// Maps a `(batch, N)` label tensor to AdaIN targets.
    pub fn forward(&self, labels: &Tensor) -> Result<AdaINStats> {
        let (_, n) = labels.dims2()?;
        if n != self.domain_count {
            return Err(Error::Config(format!(
                "mapping label has length {n}, model expects {}",
                self.domain_count
            )));
        }
        let h = leaky_relu(&self.hidden1.forward(labels)?)?;
        let h = leaky_relu(&self.hidden2.forward(&h)?)?;
        let out = self.output.forward(&h)?;
        Ok(AdaINStats {
            mu: out.narrow(1, 0, self.channels)?,
            sigma: out.narrow(1, self.channels, self.channels)?,
        })
    }

    pub fn variables(&self) -> Vec<Var> {
        [&self.hidden1, &self.hidden2, &self.output]
            .iter()
            .flat_map(|d| [d.weight.clone(), d.bias.clone()])
            .collect()
    }
}

/// Evaluates a mapping network on a single label.
pub fn map_label(net: &MappingNetwork, c: &MappingLabel, dtype: DType) -> Result<AdaINStats> {
    c.check_len(net.domain_count())?;
    net.forward(&c.to_batch(1, dtype)?)
}

/// Where an AdaIN site gets its targets from.
#[derive(Debug, Clone)]
pub enum SiteConditioning {
    /// Label-dependent targets from a mapping network.
    Mapping(MappingNetwork),
    /// Learned per-channel affine parameters (instance norm with affine),
    /// independent of the label.
    Affine { mu: Var, sigma: Var },
}

impl SiteConditioning {
    pub fn affine(b: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        Ok(Self::Affine {
            mu: b.constant("mu", &[channels], 0.0)?,
            sigma: b.constant("sigma", &[channels], 1.0)?,
        })
    }

    pub fn stats(&self, labels: &Tensor) -> Result<AdaINStats> {
        match self {
            Self::Mapping(net) => net.forward(labels),
            Self::Affine { mu, sigma } => {
                let batch = labels.dims()[0];
                let j = mu.dims()[0];
                Ok(AdaINStats {
                    mu: mu.as_tensor().unsqueeze(0)?.broadcast_as((batch, j))?,
                    sigma: sigma.as_tensor().unsqueeze(0)?.broadcast_as((batch, j))?,
                })
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Self::Mapping(net) => net.parameter_count(),
            Self::Affine { mu, sigma } => mu.elem_count() + sigma.elem_count(),
        }
    }

    pub fn is_label_dependent(&self) -> bool {
        matches!(self, Self::Mapping(_))
    }
}

/// `sigma_j * (h_j - mean(h_j)) / sqrt(var(h_j) + eps) + mu_j` per channel,
/// with population spatial statistics. `h` is `(B, C, H, W)`; `stats` rows
/// are per sample (a single row broadcasts over the batch).
pub fn adain(h: &Tensor, stats: &AdaINStats, eps: f64) -> Result<Tensor> {
    let (b, c, _, _) = h.dims4()?;
    let (sb, sc) = stats.mu.dims2()?;
    if sc != c || stats.sigma.dims2()? != (sb, sc) {
        return Err(Error::Dimension(format!(
            "adain: feature map has {c} channels, stats have {:?}/{:?}",
            stats.mu.dims(),
            stats.sigma.dims()
        )));
    }
    if sb != b && sb != 1 {
        return Err(Error::Dimension(format!(
            "adain: batch {b} vs stats batch {sb}"
        )));
    }
    let mean = h.mean_keepdim((2, 3))?;
    let centered = h.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    let mu = stats.mu.reshape((sb, c, 1, 1))?;
    let sigma = stats.sigma.reshape((sb, c, 1, 1))?;
    Ok(normed.broadcast_mul(&sigma)?.broadcast_add(&mu)?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, LEAKY_SLOPE)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_rng, ParamStore};
    use candle_core::Device;

    fn stats(mu: &[f64], sigma: &[f64]) -> AdaINStats {
        let dev = Device::Cpu;
        AdaINStats {
            mu: Tensor::from_slice(mu, (1, mu.len()), &dev).unwrap(),
            sigma: Tensor::from_slice(sigma, (1, sigma.len()), &dev).unwrap(),
        }
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn direct_evaluation_small_channel() {
        let h = Tensor::from_slice(&[1.0f64, 2.0, 3.0, 4.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let out = flat(&adain(&h, &stats(&[0.0], &[2.0]), 0.0).unwrap());
        // oracle: population std of [1,2,3,4] is sqrt(1.25)
        let sd = 1.25f64.sqrt();
        let expect: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|v| 2.0 * (v - 2.5) / sd).collect();
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in out.iter().zip([-2.6833, -0.8944, 0.8944, 2.6833]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn identity_statistics_leave_standardised_input() {
        let h = Tensor::from_slice(&[-1.0f64, 1.0, -1.0, 1.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let out = flat(&adain(&h, &stats(&[0.0], &[1.0]), DEFAULT_ADAIN_EPS).unwrap());
        for (a, b) in out.iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_channel_collapses_to_mean() {
        let h = Tensor::from_slice(&[5.0f64; 4], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let out = flat(&adain(&h, &stats(&[3.0], &[7.5]), DEFAULT_ADAIN_EPS).unwrap());
        assert_eq!(out, vec![3.0; 4]);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let h = Tensor::zeros((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let err = adain(&h, &stats(&[0.0], &[1.0]), 1e-5).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    fn network(seed: u64, std: f64) -> MappingNetwork {
        let mut store = ParamStore::new();
        let mut rng = init_rng(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng, DType::F64, std);
        MappingNetwork::new(&mut b.push("map"), 3, 64, 5).unwrap()
    }

    #[test]
    fn zero_network_gives_zero_stats() {
        let net = network(0, 0.0);
        // zero the sigma bias as well
        net.output.bias.set(&Tensor::zeros(10, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let s = map_label(&net, &MappingLabel(vec![0.3, -2.0, 1.0]), DType::F64).unwrap();
        assert_eq!(flat(&s.mu), vec![0.0; 5]);
        assert_eq!(flat(&s.sigma), vec![0.0; 5]);
        assert_eq!(net.output_dim(), 10);
    }

    #[test]
    fn distinct_labels_give_distinct_stats_deterministically() {
        let net = network(11, 0.5);
        let c1 = MappingLabel::one_hot(0, 3).unwrap();
        let c2 = MappingLabel::one_hot(1, 3).unwrap();
        let a = map_label(&net, &c1, DType::F64).unwrap();
        let a2 = map_label(&net, &c1, DType::F64).unwrap();
        let b = map_label(&net, &c2, DType::F64).unwrap();
        assert_eq!(flat(&a.mu), flat(&a2.mu));
        assert_eq!(flat(&a.sigma), flat(&a2.sigma));
        assert_ne!(flat(&a.mu), flat(&b.mu));
    }

    #[test]
    fn wrong_label_length_is_config_error() {
        let net = network(0, 0.01);
        let err = map_label(&net, &MappingLabel(vec![1.0, 0.0]), DType::F64).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn affine_site_ignores_label() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng, DType::F64, 0.01);
        let site = SiteConditioning::affine(&mut b, 4).unwrap();
        let l1 = MappingLabel(vec![1.0, 0.0]).to_batch(2, DType::F64).unwrap();
        let l2 = MappingLabel(vec![0.0, 1.0]).to_batch(2, DType::F64).unwrap();
        assert_eq!(flat(&site.stats(&l1).unwrap().sigma), flat(&site.stats(&l2).unwrap().sigma));
        assert!(!site.is_label_dependent());
        assert_eq!(site.parameter_count(), 8);
    }

    #[test]
    fn adain_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let h0: Vec<f64> = (0..18).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3 + 0.05 * i as f64).collect();
        let h = Var::from_slice(&h0, (1, 2, 3, 3), &dev).unwrap();
        let mu = Var::from_slice(&[0.4f64, -1.2], (1, 2), &dev).unwrap();
        let sigma = Var::from_slice(&[1.7f64, 0.6], (1, 2), &dev).unwrap();
        let probe: Vec<f64> = (0..18).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let probe_t = Tensor::from_slice(&probe, (1, 2, 3, 3), &dev).unwrap();
        let loss = |h: &Tensor, mu: &Tensor, sigma: &Tensor| -> Tensor {
            let s = AdaINStats { mu: mu.clone(), sigma: sigma.clone() };
            adain(h, &s, 1e-5).unwrap().mul(&probe_t).unwrap().sqr().unwrap().sum_all().unwrap()
        };
        let grads = loss(h.as_tensor(), mu.as_tensor(), sigma.as_tensor()).backward().unwrap();
        let step = 1e-6;
        for (var, which) in [(&h, 0), (&mu, 1), (&sigma, 2)] {
            let g = flat(grads.get(var).unwrap());
            let base = flat(var.as_tensor());
            for i in 0..base.len() {
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[i] += delta;
                    let t = Tensor::from_slice(&v, var.shape(), &dev).unwrap();
                    let l = match which {
                        0 => loss(&t, mu.as_tensor(), sigma.as_tensor()),
                        1 => loss(h.as_tensor(), &t, sigma.as_tensor()),
                        _ => loss(h.as_tensor(), mu.as_tensor(), &t),
                    };
                    l.to_scalar::<f64>().unwrap()
                };
                let fd = (eval(step) - eval(-step)) / (2.0 * step);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
                assert!(rel < 1e-3, "param {which} idx {i}: fd {fd} vs ad {}", g[i]);
            }
        }
    }
}
