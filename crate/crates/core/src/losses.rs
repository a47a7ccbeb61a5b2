//! Adversarial, cycle-consistency and weighted least-squares objectives.
//!
//! All reductions are means over map elements / pixels so that the
//! regularisation weights keep their meaning across image sizes.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-domain inverse-frequency weights, normalised to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainWeights(pub Vec<f64>);

impl DomainWeights {
    pub fn uniform_ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn get(&self, domain: usize) -> Option<f64> {
        self.0.get(domain).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Weight of every sample, looked up by its domain index.
    pub fn per_sample(&self, domains: &[usize]) -> Result<Vec<f64>> {
        domains
            .iter()
            .map(|&d| {
                self.get(d).ok_or_else(|| {
                    Error::Validation(format!(
                        "sample domain index {d} has no weight ({} domains)",
                        self.len()
                    ))
                })
            })
            .collect()
    }
}

/// `w_i = (1/|S_i|) / sum_j (1/|S_j|)`.
pub fn domain_weights(sizes: &[usize]) -> Result<DomainWeights> {
    if sizes.is_empty() {
        return Err(Error::Validation("domain_weights needs at least one domain".into()));
    }
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Validation(format!("domain {i} has no training samples")));
    }
    let inverse: Vec<f64> = sizes.iter().map(|&s| 1.0 / s as f64).collect();
    let total: f64 = inverse.iter().sum();
    Ok(DomainWeights(inverse.into_iter().map(|v| v / total).collect()))
}

/// Which targets the least-squares GAN terms use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanConvention {
    /// Discriminator: real -> 1, fake -> 0. Generator: fake -> 1.
    #[default]
    Standard,
    /// Literal printed objective maximised by D: `D(x)^2 + (1 - D(G(z)))^2`.
    /// The discriminator term is its negation and is unbounded below.
    Printed,
}

/// How a domain weight enters the supervised term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WlsReduction {
    /// `||w r||^2`: the residual is scaled, so the effective factor is `w^2`.
    #[default]
    ScaledResidual,
    /// `w ||r||^2`.
    ScaledSquaredNorm,
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn mean_sq_dev(t: &Tensor, target: f64) -> Result<Tensor> {
    Ok((t - target)?.sqr()?.mean_all()?)
}

/// Returns `(generator term, discriminator term)`.
pub fn adversarial_losses(
    dx_real: &Tensor,
    dx_fake: &Tensor,
    dz_real: &Tensor,
    dz_fake: &Tensor,
    convention: GanConvention,
) -> Result<(Tensor, Tensor)> {
    check_same(dx_real, dx_fake, "adversarial_losses (X maps)")?;
    check_same(dz_real, dz_fake, "adversarial_losses (Z maps)")?;
    let gen = (mean_sq_dev(dx_fake, 1.0)? + mean_sq_dev(dz_fake, 1.0)?)?;
    let disc = match convention {
        GanConvention::Standard => {
            let x = (mean_sq_dev(dx_real, 1.0)? + mean_sq_dev(dx_fake, 0.0)?)?;
            let z = (mean_sq_dev(dz_real, 1.0)? + mean_sq_dev(dz_fake, 0.0)?)?;
            (x + z)?
        }
        GanConvention::Printed => {
            let x = (mean_sq_dev(dx_real, 0.0)? + mean_sq_dev(dx_fake, 1.0)?)?;
            let z = (mean_sq_dev(dz_real, 0.0)? + mean_sq_dev(dz_fake, 1.0)?)?;
            (x + z)?.neg()?
        }
    };
    Ok((gen, disc))
}

/// `mean |F(G(z)) - z|^2 + mean |G(F(x)) - x|^2`.
pub fn cycle_loss(z: &Tensor, x: &Tensor, z_cycled: &Tensor, x_cycled: &Tensor) -> Result<Tensor> {
    check_same(z, z_cycled, "cycle_loss (z)")?;
    check_same(x, x_cycled, "cycle_loss (x)")?;
    Ok(((z_cycled - z)?.sqr()?.mean_all()? + (x_cycled - x)?.sqr()?.mean_all()?)?)
}

/// Weighted supervised loss over a batch. `forward_residual = G(z) - x` and
/// `backward_residual = F(x) - z` are `(B, ...)`; `sample_weights` has one
/// entry per batch row.
pub fn weighted_ls_loss(
    forward_residual: &Tensor,
    backward_residual: &Tensor,
    sample_weights: &[f64],
    reduction: WlsReduction,
) -> Result<Tensor> {
    check_same(forward_residual, backward_residual, "weighted_ls_loss")?;
    let b = forward_residual.dims()[0];
    if sample_weights.len() != b {
        return Err(Error::Validation(format!(
            "{} sample weights for a batch of {b}",
            sample_weights.len()
        )));
    }
    let factors: Vec<f64> = sample_weights
        .iter()
        .map(|w| match reduction {
            WlsReduction::ScaledResidual => w * w,
            WlsReduction::ScaledSquaredNorm => *w,
        })
        .collect();
    let rank = forward_residual.rank();
    let mut shape = vec![1usize; rank];
    shape[0] = b;
    let factors = Tensor::from_vec(factors, shape, forward_residual.device())?
        .to_dtype(forward_residual.dtype())?;
    let per = |r: &Tensor| -> Result<Tensor> {
        Ok(r.sqr()?.broadcast_mul(&factors)?.mean_all()?)
    };
    Ok((per(forward_residual)? + per(backward_residual)?)?)
}

/// Per-batch scalar summary of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub adv_d: f64,
    pub cyc: f64,
    pub wls: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub fn new(adv_g: f64, adv_d: f64, cyc: f64, wls: f64, lambda1: f64, lambda2: f64) -> Self {
        Self {
            adv_g,
            adv_d,
            cyc,
            wls,
            total_g: adv_g + lambda1 * cyc + lambda2 * wls,
            total_d: adv_d,
            lambda1,
            lambda2,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("cyc", self.cyc),
            ("wls", self.wls),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for it in items {
            acc.adv_g += it.adv_g / n;
            acc.adv_d += it.adv_d / n;
            acc.cyc += it.cyc / n;
            acc.wls += it.wls / n;
            acc.total_g += it.total_g / n;
            acc.total_d += it.total_d / n;
        }
        if let Some(first) = items.first() {
            acc.lambda1 = first.lambda1;
            acc.lambda2 = first.lambda2;
        }
        acc
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn full(v: f64, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::full(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn weights_examples() {
        let w = domain_weights(&[1, 1, 1]).unwrap();
        for v in &w.0 {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(domain_weights(&[1, 3]).unwrap().0, vec![0.75, 0.25]);
        let w = domain_weights(&[734, 365, 173]).unwrap();
        for (a, b) in w.0.iter().zip([0.1379, 0.2772, 0.5849]) {
            assert!((a - b).abs() < 5e-5, "{a} vs {b}");
        }
        assert!(domain_weights(&[3, 0]).is_err());
        assert!(domain_weights(&[]).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(sizes in proptest::collection::vec(1usize..100_000, 1..12)) {
            let w = domain_weights(&sizes).unwrap();
            prop_assert!((w.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.0.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn adversarial_examples() {
        let s = (2, 1, 3, 3);
        let (_, d) = adversarial_losses(&full(1.0, s), &full(0.0, s), &full(1.0, s), &full(0.0, s), GanConvention::Standard).unwrap();
        assert_eq!(scalar(&d).unwrap(), 0.0);
        let h = full(0.5, s);
        let (g, d) = adversarial_losses(&h, &h, &h, &h, GanConvention::Standard).unwrap();
        assert!((scalar(&d).unwrap() - 1.0).abs() < 1e-12);
        assert!((scalar(&g).unwrap() - 0.5).abs() < 1e-12);
        let (g, _) = adversarial_losses(&h, &full(1.0, s), &h, &full(1.0, s), GanConvention::Standard).unwrap();
        assert_eq!(scalar(&g).unwrap(), 0.0);
    }

    #[test]
    fn printed_convention_is_negated_literal_sum() {
        let s = (1, 1, 2, 2);
        let (_, d) = adversarial_losses(&full(1.0, s), &full(0.0, s), &full(1.0, s), &full(0.0, s), GanConvention::Printed).unwrap();
        assert_eq!(scalar(&d).unwrap(), -4.0);
    }

    #[test]
    fn adversarial_shape_mismatch() {
        let r = adversarial_losses(&full(1.0, (1, 1, 2, 2)), &full(1.0, (1, 1, 3, 2)), &full(1.0, (1, 1, 2, 2)), &full(1.0, (1, 1, 2, 2)), GanConvention::Standard);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn cycle_examples() {
        let s = (2, 1, 4, 4);
        let z = Tensor::randn(0f64, 1.0, s, &Device::Cpu).unwrap();
        let x = Tensor::randn(0f64, 1.0, s, &Device::Cpu).unwrap();
        assert_eq!(scalar(&cycle_loss(&z, &x, &z, &x).unwrap()).unwrap(), 0.0);
        let zc = (&z + 1.0).unwrap();
        assert!((scalar(&cycle_loss(&z, &x, &zc, &x).unwrap()).unwrap() - 1.0).abs() < 1e-12);
        let rz = Tensor::randn(0f64, 1.0, s, &Device::Cpu).unwrap();
        let rx = Tensor::randn(0f64, 1.0, s, &Device::Cpu).unwrap();
        let base = scalar(&cycle_loss(&z, &x, &(&z + &rz).unwrap(), &(&x + &rx).unwrap()).unwrap()).unwrap();
        let scaled = scalar(&cycle_loss(&z, &x, &(&z + (&rz * 3.0).unwrap()).unwrap(), &(&x + (&rx * 3.0).unwrap()).unwrap()).unwrap()).unwrap();
        assert!((scaled - 9.0 * base).abs() < 1e-9 * scaled);
        assert!(cycle_loss(&z, &x, &full(0.0, (1, 1, 4, 4)), &x).is_err());
    }

    #[test]
    fn weighted_ls_examples() {
        let s = (1, 1, 4, 4);
        let zero = full(0.0, s);
        let one = full(1.0, s);
        assert_eq!(scalar(&weighted_ls_loss(&zero, &zero, &[0.3], WlsReduction::ScaledResidual).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&weighted_ls_loss(&one, &zero, &[1.0], WlsReduction::ScaledResidual).unwrap()).unwrap(), 1.0);
        assert_eq!(scalar(&weighted_ls_loss(&one, &zero, &[0.5], WlsReduction::ScaledResidual).unwrap()).unwrap(), 0.25);
        assert_eq!(scalar(&weighted_ls_loss(&one, &zero, &[0.5], WlsReduction::ScaledSquaredNorm).unwrap()).unwrap(), 0.5);
    }

    #[test]
    fn weighted_ls_mixed_batch() {
        // rows: residual 1 with weight 0.5, residual 2 with weight 1 -> mean(0.25, 4) = 2.125
        let r = Tensor::from_slice(&[1.0f64, 1.0, 2.0, 2.0], (2, 1, 1, 2), &Device::Cpu).unwrap();
        let z = r.zeros_like().unwrap();
        let v = scalar(&weighted_ls_loss(&r, &z, &[0.5, 1.0], WlsReduction::ScaledResidual).unwrap()).unwrap();
        assert!((v - 2.125).abs() < 1e-12);
    }

    #[test]
    fn unknown_domain_index_is_validation_error() {
        let w = domain_weights(&[2, 2]).unwrap();
        assert!(matches!(w.per_sample(&[0, 2]), Err(Error::Validation(_))));
        assert_eq!(w.per_sample(&[1, 0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn breakdown_total() {
        let b = LossBreakdown::new(0.5, 1.0, 0.1, 0.2, 10.0, 10.0);
        assert!((b.total_g - 3.5).abs() < 1e-12);
        assert!(b.first_non_finite().is_none());
        let bad = LossBreakdown::new(0.5, f64::NAN, 0.1, 0.2, 10.0, 10.0);
        assert_eq!(bad.first_non_finite(), Some("adv_d"));
    }
}
