//! Image-quality metrics and agreement statistics.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stabilising constants for the global SSIM, in 16-bit intensity units.
pub const SSIM_ALPHA1: f64 = (0.0002 * 65535.0) * (0.0002 * 65535.0);
pub const SSIM_ALPHA2: f64 = (0.0007 * 65535.0) * (0.0007 * 65535.0);

/// Multiplier for Bland-Altman limits of agreement.
pub const LIMITS_Z: f64 = 1.96;

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

/// `100 * ||z - x|| / ||x||`.
pub fn nrmse<T: Copy + Into<f64>>(z: &[T], x: &[T]) -> Result<f64> {
    same_len(z.len(), x.len(), "nrmse")?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&a, &b) in z.iter().zip(x) {
        let (a, b) = (a.into(), b.into());
        num += (a - b) * (a - b);
        den += b * b;
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("nrmse reference has zero norm".into()));
    }
    Ok(100.0 * (num / den).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConstants {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for SsimConstants {
    fn default() -> Self {
        Self {
            alpha1: SSIM_ALPHA1,
            alpha2: SSIM_ALPHA2,
        }
    }
}

/// Global-statistics SSIM (single window covering the whole array),
/// population moments.
pub fn ssim<T: Copy + Into<f64>>(z: &[T], x: &[T], k: SsimConstants) -> Result<f64> {
    same_len(z.len(), x.len(), "ssim")?;
    if z.is_empty() {
        return Err(Error::Dimension("ssim of empty arrays".into()));
    }
    let n = z.len() as f64;
    let mz = z.iter().map(|&v| v.into()).sum::<f64>() / n;
    let mx = x.iter().map(|&v| v.into()).sum::<f64>() / n;
    let (mut vz, mut vx, mut cov) = (0.0, 0.0, 0.0);
    for (&a, &b) in z.iter().zip(x) {
        let (da, db) = (a.into() - mz, b.into() - mx);
        vz += da * da;
        vx += db * db;
        cov += da * db;
    }
    let (vz, vx, cov) = (vz / n, vx / n, cov / n);
    let num = (2.0 * mz * mx + k.alpha1) * (2.0 * cov + k.alpha2);
    let den = (mz * mz + mx * mx + k.alpha1) * (vz + vx + k.alpha2);
    if den == 0.0 {
        return Err(Error::UndefinedMetric("ssim denominator is zero".into()));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_difference: f64,
    pub sd_difference: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
    pub n: usize,
}

/// Differences `a - b`; limits `mean +- 1.96 sd` with the `n - 1` estimator.
pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    same_len(a.len(), b.len(), "bland_altman")?;
    if a.len() < 2 {
        return Err(Error::Validation("bland_altman needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(BlandAltman {
        mean_difference: mean,
        sd_difference: sd,
        lower_limit: mean - LIMITS_Z * sd,
        upper_limit: mean + LIMITS_Z * sd,
        n: d.len(),
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a.len(), b.len(), "pearson_r")?;
    if a.len() < 2 {
        return Err(Error::Validation("pearson_r needs at least two pairs".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedMetric("pearson_r: a series has zero variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Disagreement weighting for ordinal categories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum KappaWeighting {
    #[default]
    Linear,
    Quadratic,
}

/// Cohen's weighted kappa from a `k x k` confusion table (rows: rater A).
pub fn weighted_kappa_table(table: &[Vec<f64>], weighting: KappaWeighting) -> Result<f64> {
    let k = table.len();
    if k < 2 || table.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension("kappa table must be square with k >= 2".into()));
    }
    let total: f64 = table.iter().flatten().sum();
    if total <= 0.0 {
        return Err(Error::Validation("kappa table is empty".into()));
    }
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum::<f64>() / total).collect();
    let cols: Vec<f64> = (0..k)
        .map(|j| table.iter().map(|r| r[j]).sum::<f64>() / total)
        .collect();
    let weight = |i: usize, j: usize| {
        let d = (i as f64 - j as f64).abs() / (k as f64 - 1.0);
        match weighting {
            KappaWeighting::Linear => 1.0 - d,
            KappaWeighting::Quadratic => 1.0 - d * d,
        }
    };
    let (mut po, mut pe) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            po += weight(i, j) * table[i][j] / total;
            pe += weight(i, j) * rows[i] * cols[j];
        }
    }
    if (1.0 - pe).abs() < 1e-15 {
        return if (1.0 - po).abs() < 1e-15 {
            Ok(1.0)
        } else {
            Err(Error::UndefinedMetric("kappa: chance agreement is 1".into()))
        };
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Weighted kappa for two binary rating series. With two categories the
/// linear and quadratic weightings coincide with Cohen's unweighted kappa.
pub fn weighted_kappa(a: &[bool], b: &[bool]) -> Result<f64> {
    same_len(a.len(), b.len(), "weighted_kappa")?;
    if a.is_empty() {
        return Err(Error::Validation("weighted_kappa needs at least one rating".into()));
    }
    let mut table = vec![vec![0.0; 2]; 2];
    for (&x, &y) in a.iter().zip(b) {
        table[x as usize][y as usize] += 1.0;
    }
    weighted_kappa_table(&table, KappaWeighting::Linear)
}

/// Mean over `target` divided by mean over `reference`.
pub fn region_ratio(
    volume: &Array3<f32>,
    target: &Array3<bool>,
    reference: &Array3<bool>,
) -> Result<f64> {
    let mean_over = |mask: &Array3<bool>, name: &str| -> Result<f64> {
        if mask.dim() != volume.dim() {
            return Err(Error::Validation(format!(
                "{name} mask shape {:?} != volume shape {:?}",
                mask.dim(),
                volume.dim()
            )));
        }
        let (mut sum, mut n) = (0.0f64, 0usize);
        for (&v, &m) in volume.iter().zip(mask.iter()) {
            if m {
                sum += v as f64;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Validation(format!("{name} mask is empty")));
        }
        Ok(sum / n as f64)
    };
    let t = mean_over(target, "target")?;
    let r = mean_over(reference, "reference")?;
    if r <= 0.0 {
        return Err(Error::Validation(format!(
            "reference region mean {r} is not positive"
        )));
    }
    Ok(t / r)
}

/// Metrics for one corrected volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub id: String,
    pub domain: usize,
    pub nrmse: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_slice: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub volumes: Vec<VolumeMetrics>,
    pub mean_nrmse: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_volumes(volumes: Vec<VolumeMetrics>) -> Self {
        let n = volumes.len().max(1) as f64;
        let mean_nrmse = volumes.iter().map(|v| v.nrmse).sum::<f64>() / n;
        let mean_ssim = volumes.iter().map(|v| v.ssim).sum::<f64>() / n;
        Self {
            volumes,
            mean_nrmse,
            mean_ssim,
        }
    }

    /// Mean NRMSE and SSIM restricted to one domain.
    pub fn domain_means(&self, domain: usize) -> Option<(f64, f64)> {
        let sel: Vec<_> = self.volumes.iter().filter(|v| v.domain == domain).collect();
        if sel.is_empty() {
            return None;
        }
        let n = sel.len() as f64;
        Some((
            sel.iter().map(|v| v.nrmse).sum::<f64>() / n,
            sel.iter().map(|v| v.ssim).sum::<f64>() / n,
        ))
    }
}

/// Volume-level metrics with all slices pooled, plus an optional per-slice series.
pub fn volume_metrics(
    id: &str,
    domain: usize,
    corrected: &Array3<f32>,
    reference: &Array3<f32>,
    constants: SsimConstants,
    per_slice: bool,
) -> Result<VolumeMetrics> {
    if corrected.dim() != reference.dim() {
        return Err(Error::Dimension(format!(
            "volume {id}: corrected {:?} vs reference {:?}",
            corrected.dim(),
            reference.dim()
        )));
    }
    let c = corrected.as_standard_layout();
    let r = reference.as_standard_layout();
    let (cs, rs) = (c.as_slice().unwrap(), r.as_slice().unwrap());
    let slices = if per_slice {
        let plane = corrected.dim().1 * corrected.dim().2;
        let mut out = Vec::new();
        for (a, b) in cs.chunks(plane).zip(rs.chunks(plane)) {
            // all-zero reference slices have undefined NRMSE
            let n = nrmse(a, b).unwrap_or(f64::NAN);
            out.push((n, ssim(a, b, constants)?));
        }
        Some(out)
    } else {
        None
    };
    Ok(VolumeMetrics {
        id: id.to_string(),
        domain,
        nrmse: nrmse(cs, rs)?,
        ssim: ssim(cs, rs, constants)?,
        per_slice: slices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nrmse_identities() {
        let x = [3.0, -1.0, 4.0, 1.5];
        let two: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert_eq!(nrmse(&x, &x).unwrap(), 0.0);
        assert_eq!(nrmse(&two, &x).unwrap(), 100.0);
        assert_eq!(nrmse(&[0.0; 4], &x).unwrap(), 100.0);
        assert!(matches!(nrmse(&x, &[0.0; 4]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ssim_identities() {
        let x = [100.0, 2000.0, 35.0, 7.0];
        assert_eq!(ssim(&x, &x, SsimConstants::default()).unwrap(), 1.0);
        assert_eq!(ssim(&[42.0; 5], &[42.0; 5], SsimConstants::default()).unwrap(), 1.0);
    }

    #[test]
    fn ssim_two_pixel_hand_evaluation() {
        // z = [0, 2], x = [0, 1]: mu_z = 1, mu_x = 0.5, var_z = 1, var_x = 0.25, cov = 0.5
        let (a1, a2) = (SSIM_ALPHA1, SSIM_ALPHA2);
        let expect = (2.0 * 1.0 * 0.5 + a1) * (2.0 * 0.5 + a2) / ((1.0 + 0.25 + a1) * (1.0 + 0.25 + a2));
        let got = ssim(&[0.0, 2.0], &[0.0, 1.0], SsimConstants::default()).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert!((SSIM_ALPHA1 - 171.793449).abs() < 1e-6);
        assert!((SSIM_ALPHA2 - 2104.46975025).abs() < 1e-6);
    }

    #[test]
    fn bland_altman_examples() {
        let a = [1.0, 2.0, 3.0];
        let same = bland_altman(&a, &a).unwrap();
        assert_eq!((same.mean_difference, same.lower_limit, same.upper_limit), (0.0, 0.0, 0.0));
        let flat = bland_altman(&[2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((flat.mean_difference, flat.lower_limit, flat.upper_limit), (1.0, 1.0, 1.0));
        let r = bland_altman(&[0.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r.mean_difference, 1.0);
        assert!((r.sd_difference - 2f64.sqrt()).abs() < 1e-15);
        assert!((r.lower_limit + 1.7718).abs() < 1e-4);
        assert!((r.upper_limit - 3.7718).abs() < 1e-4);
        assert!(bland_altman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 7.0];
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson_r(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson_r(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        // brute force: mean a = 2, mean b = 7/3
        let (da, db) = ([-1.0, 0.0, 1.0], [-4.0 / 3.0, -1.0 / 3.0, 5.0 / 3.0]);
        let num: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
        let den = (da.iter().map(|x| x * x).sum::<f64>() * db.iter().map(|y| y * y).sum::<f64>()).sqrt();
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - num / den).abs() < 1e-12);
        assert!(matches!(pearson_r(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn kappa_examples() {
        let a = [true, false, true, true, false];
        assert_eq!(weighted_kappa(&a, &a).unwrap(), 1.0);
        // p_o = p_e = 0.5 with all marginals 1/2
        let chance = weighted_kappa_table(&[vec![1.0, 1.0], vec![1.0, 1.0]], KappaWeighting::Linear).unwrap();
        assert!(chance.abs() < 1e-15);
        // [[20,5],[10,15]]: p_o = 0.7, p_e = 0.5*0.6 + 0.5*0.4 = 0.5 -> 0.4
        let k = weighted_kappa_table(&[vec![20.0, 5.0], vec![10.0, 15.0]], KappaWeighting::Linear).unwrap();
        assert!((k - 0.4).abs() < 1e-12);
        let q = weighted_kappa_table(&[vec![20.0, 5.0], vec![10.0, 15.0]], KappaWeighting::Quadratic).unwrap();
        assert!((q - k).abs() < 1e-12);
        assert_eq!(weighted_kappa(&[true; 3], &[true; 3]).unwrap(), 1.0);
    }

    #[test]
    fn region_ratio_examples() {
        let mut vol = Array3::<f32>::from_elem((2, 4, 4), 5.0);
        let mut target = Array3::from_elem((2, 4, 4), false);
        let mut reference = Array3::from_elem((2, 4, 4), false);
        target[[0, 0, 0]] = true;
        target[[1, 1, 1]] = true;
        reference[[0, 3, 3]] = true;
        assert_eq!(region_ratio(&vol, &target, &reference).unwrap(), 1.0);
        vol[[0, 0, 0]] = 10.0;
        vol[[1, 1, 1]] = 10.0;
        assert_eq!(region_ratio(&vol, &target, &reference).unwrap(), 2.0);
        let empty = Array3::from_elem((2, 4, 4), false);
        assert!(region_ratio(&vol, &empty, &reference).is_err());
        let zero = Array3::<f32>::zeros((2, 4, 4));
        assert!(region_ratio(&zero, &target, &reference).is_err());
    }

    fn series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.0f64..5000.0, n),
                proptest::collection::vec(0.0f64..5000.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded((z, x) in series()) {
            let k = SsimConstants::default();
            let a = ssim(&z, &x, k).unwrap();
            prop_assert!((a - ssim(&x, &z, k).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&a));
            prop_assert!((ssim(&x, &x, k).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn nrmse_homogeneous((z, x) in series(), s in 0.01f64..100.0) {
            prop_assume!(x.iter().any(|v| *v > 0.0));
            let zs: Vec<f64> = z.iter().map(|v| v * s).collect();
            let xs: Vec<f64> = x.iter().map(|v| v * s).collect();
            let a = nrmse(&z, &x).unwrap();
            prop_assert!((a - nrmse(&zs, &xs).unwrap()).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn bland_altman_limits_symmetric((a, b) in series()) {
            let r = bland_altman(&a, &b).unwrap();
            prop_assert!(r.lower_limit <= r.mean_difference && r.mean_difference <= r.upper_limit);
            let up = r.upper_limit - r.mean_difference;
            let down = r.mean_difference - r.lower_limit;
            prop_assert!((up - down).abs() <= 1e-9 * up.max(1.0));
        }

        #[test]
        fn kappa_rater_swap(a in proptest::collection::vec(any::<bool>(), 1..40), flips in proptest::collection::vec(any::<bool>(), 40)) {
            let b: Vec<bool> = a.iter().zip(&flips).map(|(x, f)| x ^ f).collect();
            match (weighted_kappa(&a, &b), weighted_kappa(&b, &a)) {
                (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "asymmetric error"),
            }
        }
    }
}
