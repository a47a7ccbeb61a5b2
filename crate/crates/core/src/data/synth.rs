//! Count-thinning degradation: `z = x + n` with Poisson-limited `n`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::{gaussian_smooth, DomainSpec, Volume};
use crate::conditioning::MappingLabel;
use crate::error::{Error, Result};

/// Returns `(short, standard)`. `standard` is `clean` blurred by the domain
/// PSF and `short = Poisson(t s standard) / (t s)`.
pub fn synthesize_domain(clean: &Volume, spec: &DomainSpec, seed: u64) -> Result<(Volume, Volume)> {
    clean.validate()?;
    if let Some(v) = clean.voxels.iter().find(|v| **v < 0.0) {
        return Err(Error::Validation(format!("clean volume has a negative voxel ({v})")));
    }
    if !(spec.count_scale > 0.0 && spec.count_scale.is_finite()) {
        return Err(Error::Validation(format!("count_scale must be > 0, got {}", spec.count_scale)));
    }
    if !(spec.time_fraction > 0.0 && spec.time_fraction <= 1.0) {
        return Err(Error::Validation(format!("time_fraction must be in (0, 1], got {}", spec.time_fraction)));
    }
    let mut standard = gaussian_smooth(clean, spec.psf_fwhm_mm)?;
    // the renormalised blur can leave tiny negative round-off
    standard.voxels.mapv_inplace(|v| v.max(0.0));
    let gain = spec.time_fraction * spec.count_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let short = standard.voxels.mapv(|v| {
        let lambda = gain * v as f64;
        if lambda <= 0.0 {
            return 0.0;
        }
        let counts: f64 = Poisson::new(lambda).expect("finite positive rate").sample(&mut rng);
        (counts / gain) as f32
    });
    let mut short = standard.with_voxels(short);
    if let Some(d) = standard.scan_duration_min {
        short.scan_duration_min = Some(d * spec.time_fraction);
    }
    Ok((short, standard))
}

/// `n` domains with distinct resolution and count level. For `n = 3` these are
/// 2/4/6 mm PSFs with count scales 0.2/0.05/0.016 at a 10% time fraction.
pub fn default_domains(n: usize) -> Result<Vec<DomainSpec>> {
    if n == 0 {
        return Err(Error::Validation("need at least one domain".into()));
    }
    let (psf_lo, psf_hi) = (2.0, 6.0);
    let (cs_lo, cs_hi) = (0.2f64, 0.016f64);
    (0..n)
        .map(|i| {
            let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            Ok(DomainSpec {
                index: i,
                name: format!("domain{i}"),
                one_hot_label: MappingLabel::one_hot(i, n)?,
                count_scale: (cs_lo.ln() + f * (cs_hi.ln() - cs_lo.ln())).exp(),
                time_fraction: 0.1,
                psf_fwhm_mm: psf_lo + f * (psf_hi - psf_lo),
            })
        })
        .collect()
}

/// A held-out domain whose degradation sits between `a` (`alpha = 0`) and `b`
/// (`alpha = 1`): PSF and time fraction interpolate linearly, the count scale
/// geometrically. The label field carries the matching convex combination of
/// the two one-hot labels, for reference only.
pub fn mixture_domain(a: &DomainSpec, b: &DomainSpec, alpha: f64, name: &str) -> Result<DomainSpec> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("mixture weight must be in [0, 1], got {alpha}")));
    }
    a.one_hot_label.check_len(b.one_hot_label.len())?;
    let lerp = |x: f64, y: f64| x + alpha * (y - x);
    let label = a
        .one_hot_label
        .as_slice()
        .iter()
        .zip(b.one_hot_label.as_slice())
        .map(|(x, y)| lerp(*x, *y))
        .collect();
    Ok(DomainSpec {
        index: a.index,
        name: name.to_string(),
        one_hot_label: MappingLabel(label),
        count_scale: lerp(a.count_scale.ln(), b.count_scale.ln()).exp(),
        time_fraction: lerp(a.time_fraction, b.time_fraction),
        psf_fwhm_mm: lerp(a.psf_fwhm_mm, b.psf_fwhm_mm),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::nrmse;
    use ndarray::Array3;

    fn spec(count_scale: f64, time_fraction: f64, psf: f64) -> DomainSpec {
        DomainSpec {
            index: 0,
            name: "t".into(),
            one_hot_label: MappingLabel(vec![1.0]),
            count_scale,
            time_fraction,
            psf_fwhm_mm: psf,
        }
    }

    #[test]
    fn zero_volume_stays_zero() {
        let v = Volume::new(Array3::zeros((2, 8, 8)), [2.0; 3]).unwrap();
        let (z, x) = synthesize_domain(&v, &spec(0.1, 0.1, 4.0), 3).unwrap();
        assert!(z.voxels.iter().all(|v| *v == 0.0));
        assert!(x.voxels.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn huge_counts_converge_to_standard() {
        let clean = Array3::from_shape_fn((2, 16, 16), |(a, b, c)| 100.0 + (a * 7 + b * 3 + c) as f32);
        let v = Volume::new(clean, [2.0; 3]).unwrap();
        let (z, x) = synthesize_domain(&v, &spec(1e6, 1.0, 4.0), 9).unwrap();
        let e = nrmse(z.voxels.as_slice().unwrap(), x.voxels.as_slice().unwrap()).unwrap();
        assert!(e < 0.5, "{e}");
    }

    #[test]
    fn variance_follows_poisson_law() {
        let value = 50.0f32;
        let v = Volume::new(Array3::from_elem((4, 160, 160), value), [1.0; 3]).unwrap();
        let (z, _) = synthesize_domain(&v, &spec(1000.0, 0.1, 0.0), 11).unwrap();
        let n = z.voxels.len() as f64;
        let mean = z.voxels.iter().map(|v| *v as f64).sum::<f64>() / n;
        let var = z.voxels.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expect = value as f64 / 100.0;
        assert!((var - expect).abs() / expect < 0.1, "{var} vs {expect}");
    }

    #[test]
    fn unbiased_over_seeds() {
        let v = Volume::new(Array3::from_elem((1, 4, 4), 20.0), [1.0; 3]).unwrap();
        let sp = spec(1.0, 0.5, 0.0);
        let reps = 400;
        let mut sum = 0.0f64;
        for seed in 0..reps {
            sum += synthesize_domain(&v, &sp, seed).unwrap().0.voxels[[0, 1, 2]] as f64;
        }
        let mean = sum / reps as f64;
        // sd of the estimator: sqrt(v / (t s) / reps)
        let sd = (20.0f64 / 0.5 / reps as f64).sqrt();
        assert!((mean - 20.0).abs() < 3.0 * sd, "{mean}");
    }

    #[test]
    fn negative_voxels_rejected() {
        let mut a = Array3::zeros((1, 2, 2));
        a[[0, 0, 1]] = -1.0;
        let v = Volume::new(a, [1.0; 3]).unwrap();
        assert!(matches!(synthesize_domain(&v, &spec(1.0, 0.5, 0.0), 0), Err(Error::Validation(_))));
    }

    #[test]
    fn defaults_and_mixture() {
        let d = default_domains(3).unwrap();
        for s in &d {
            s.validate(3).unwrap();
        }
        assert!((d[1].count_scale - 0.2f64.powf(0.5) * 0.016f64.powf(0.5)).abs() < 1e-12);
        let m = mixture_domain(&d[0], &d[1], 0.5, "mix").unwrap();
        assert_eq!(m.one_hot_label.0, vec![0.5, 0.5, 0.0]);
        assert!((m.psf_fwhm_mm - 3.0).abs() < 1e-12);
        assert!(m.count_scale < d[0].count_scale && m.count_scale > d[1].count_scale);
    }
}
