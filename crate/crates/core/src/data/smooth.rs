use ndarray::{Array3, Axis};

use super::Volume;
use crate::error::{Error, Result};

/// `FWHM = 2 sqrt(2 ln 2) sigma`.
pub const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949_3;

fn kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as usize;
    (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect()
}

fn smooth_axis(data: &mut Array3<f32>, axis: usize, sigma: f64) {
    let k = kernel(sigma);
    let radius = (k.len() / 2) as isize;
    for mut lane in data.lanes_mut(Axis(axis)) {
        let src: Vec<f64> = lane.iter().map(|&v| v as f64).collect();
        let n = src.len() as isize;
        for (i, out) in lane.iter_mut().enumerate() {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (t, &w) in k.iter().enumerate() {
                let j = i as isize + t as isize - radius;
                if (0..n).contains(&j) {
                    acc += w * src[j as usize];
                    norm += w;
                }
            }
            // kernel truncated at the border is renormalised, so constants survive
            *out = (acc / norm) as f32;
        }
    }
}

/// Separable Gaussian blur with `sigma = fwhm / (2.3548 * spacing)` voxels per axis.
pub fn gaussian_smooth(volume: &Volume, fwhm_mm: f64) -> Result<Volume> {
    if !(fwhm_mm >= 0.0) || !fwhm_mm.is_finite() {
        return Err(Error::Validation(format!("fwhm must be a finite value >= 0, got {fwhm_mm}")));
    }
    if fwhm_mm == 0.0 {
        return Ok(volume.clone());
    }
    if volume.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Validation(format!(
            "unknown voxel spacing {:?}; smoothing needs positive spacing on every axis",
            volume.spacing
        )));
    }
    let mut voxels = volume.voxels.clone();
    for axis in 0..3 {
        let sigma = fwhm_mm / (FWHM_TO_SIGMA * volume.spacing[axis]);
        if voxels.len_of(Axis(axis)) > 1 && sigma > 0.0 {
            smooth_axis(&mut voxels, axis, sigma);
        }
    }
    Ok(volume.with_voxels(voxels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(v: Array3<f32>, spacing: [f64; 3]) -> Volume {
        Volume::new(v, spacing).unwrap()
    }

    #[test]
    fn zero_fwhm_is_identity() {
        let v = vol(Array3::from_shape_fn((3, 4, 5), |(a, b, c)| (a + b * c) as f32), [1.0; 3]);
        assert_eq!(gaussian_smooth(&v, 0.0).unwrap(), v);
    }

    #[test]
    fn constants_are_preserved() {
        let v = vol(Array3::from_elem((6, 9, 7), 3.5), [2.0, 1.0, 1.5]);
        let out = gaussian_smooth(&v, 4.0).unwrap();
        for x in out.voxels.iter() {
            assert!((x - 3.5).abs() < 1e-5);
        }
    }

    #[test]
    fn impulse_second_moment_matches_sigma() {
        let n = 41;
        let mut a = Array3::zeros((1, n, n));
        a[[0, 20, 20]] = 1.0;
        let spacing = [1.0, 1.0, 1.0];
        let fwhm = 5.0;
        let out = gaussian_smooth(&vol(a, spacing), fwhm).unwrap();
        let sigma = fwhm / FWHM_TO_SIGMA;
        let (mut total, mut m2) = (0.0f64, 0.0f64);
        for ((_, r, _), &v) in out.voxels.indexed_iter() {
            let d = r as f64 - 20.0;
            total += v as f64;
            m2 += v as f64 * d * d;
        }
        let var = m2 / total;
        assert!((var - sigma * sigma).abs() / (sigma * sigma) < 0.02, "{var} vs {}", sigma * sigma);
    }

    #[test]
    fn unknown_spacing_rejected() {
        let v = Volume {
            voxels: Array3::zeros((2, 2, 2)),
            spacing: [0.0, 1.0, 1.0],
            intensity_units: String::new(),
            scan_duration_min: None,
        };
        assert!(matches!(gaussian_smooth(&v, 4.0), Err(Error::Validation(_))));
    }
}
