//! Volumes, paired slices, ingestion and the synthetic multi-domain simulator.

mod container;
mod dataset;
mod nifti;
mod phantom;
mod smooth;
mod synth;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

pub use container::{load_volume, save_volume, VolumeManifest, CONTAINER_SCHEMA_VERSION};
pub use dataset::{
    build_dataset, load_dataset, save_dataset, synthesize_subjects, Dataset, DatasetConfig,
    DatasetManifest, MixtureSpec, Split, Subject, SubjectRecord, DATASET_MANIFEST_FILE, DATASET_SCHEMA_VERSION,
};
pub use nifti::{load_nifti, NiftiDatatype};
pub use phantom::{make_phantom, Phantom, PhantomKind, RegionMasks, PHANTOM_AMPLITUDE, PHANTOM_MULTIPLE};
pub use smooth::{gaussian_smooth, FWHM_TO_SIGMA};
pub use synth::{default_domains, mixture_domain, synthesize_domain};

use crate::conditioning::MappingLabel;
use crate::error::{Error, Result};

/// A 3-D scalar field in `(slice, row, column)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    /// Voxel spacing in mm, same axis order as `voxels`.
    pub spacing: [f64; 3],
    pub intensity_units: String,
    pub scan_duration_min: Option<f64>,
}

impl Volume {
    pub fn new(voxels: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        let v = Self {
            voxels,
            spacing,
            intensity_units: "arbitrary".into(),
            scan_duration_min: None,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, h, w) = self.voxels.dim();
        if s == 0 || h == 0 || w == 0 {
            return Err(Error::Validation(format!(
                "volume has an empty dimension: {:?}",
                self.voxels.dim()
            )));
        }
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("volume contains NaN or Inf voxels".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn slice(&self, k: usize) -> Array2<f32> {
        self.voxels.slice(s![k, .., ..]).to_owned()
    }

    pub fn max(&self) -> f32 {
        self.voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Same metadata, new voxels.
    pub fn with_voxels(&self, voxels: Array3<f32>) -> Self {
        Self {
            voxels,
            spacing: self.spacing,
            intensity_units: self.intensity_units.clone(),
            scan_duration_min: self.scan_duration_min,
        }
    }
}

/// One aligned (short-scan, standard-scan) training slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub z: Array2<f32>,
    pub x: Array2<f32>,
    pub domain_index: usize,
    pub subject_id: String,
}

impl SlicePair {
    pub fn new(z: Array2<f32>, x: Array2<f32>, domain_index: usize, subject_id: String) -> Result<Self> {
        if z.dim() != x.dim() {
            return Err(Error::Dimension(format!(
                "slice pair shapes differ: {:?} vs {:?}",
                z.dim(),
                x.dim()
            )));
        }
        Ok(Self {
            z,
            x,
            domain_index,
            subject_id,
        })
    }

    /// The degradation `n = z - x`.
    pub fn noise(&self) -> Array2<f32> {
        &self.z - &self.x
    }
}

/// Description of one acquisition domain and its synthetic degradation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub index: usize,
    pub name: String,
    pub one_hot_label: MappingLabel,
    /// Expected counts per unit intensity for a full-length scan.
    pub count_scale: f64,
    /// Fraction of the standard acquisition time in the short scan.
    pub time_fraction: f64,
    /// Resolution of the standard scan (applied to the clean phantom).
    pub psf_fwhm_mm: f64,
}

impl DomainSpec {
    pub fn validate(&self, domain_count: usize) -> Result<()> {
        let expect = MappingLabel::one_hot(self.index, domain_count)?;
        if self.one_hot_label != expect {
            return Err(Error::Validation(format!(
                "domain {} ({}) label {:?} is not the one-hot vector for index {}",
                self.index, self.name, self.one_hot_label.0, self.index
            )));
        }
        if !(self.count_scale > 0.0) {
            return Err(Error::Validation(format!("domain {}: count_scale must be > 0", self.name)));
        }
        if !(self.time_fraction > 0.0 && self.time_fraction <= 1.0) {
            return Err(Error::Validation(format!(
                "domain {}: time_fraction must be in (0, 1]",
                self.name
            )));
        }
        if !(self.psf_fwhm_mm >= 0.0) {
            return Err(Error::Validation(format!("domain {}: psf_fwhm_mm must be >= 0", self.name)));
        }
        Ok(())
    }
}

/// Padding/cropping applied to slices at ingestion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Centred zero padding up to the next multiple.
    #[default]
    Pad,
    /// Centred crop down to the previous multiple.
    Crop,
}

/// Record of an in-plane fit so that outputs can be mapped back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceFit {
    pub original: (usize, usize),
    pub fitted: (usize, usize),
    /// Offset of the original grid inside the fitted one (Pad) or of the
    /// fitted grid inside the original (Crop).
    pub offset: (usize, usize),
    pub mode: FitMode,
}

impl SliceFit {
    pub fn plan(h: usize, w: usize, multiple: usize, mode: FitMode) -> Result<Self> {
        if multiple == 0 {
            return Err(Error::Validation("fit multiple must be positive".into()));
        }
        let target = |n: usize| match mode {
            FitMode::Pad => n.div_ceil(multiple) * multiple,
            FitMode::Crop => (n / multiple) * multiple,
        };
        let (th, tw) = (target(h), target(w));
        if th == 0 || tw == 0 {
            return Err(Error::Validation(format!(
                "cannot crop {h}x{w} to a multiple of {multiple}"
            )));
        }
        let offset = (th.abs_diff(h) / 2, tw.abs_diff(w) / 2);
        Ok(Self {
            original: (h, w),
            fitted: (th, tw),
            offset,
            mode,
        })
    }

    pub fn apply(&self, v: &Array3<f32>) -> Array3<f32> {
        let (s, _, _) = v.dim();
        let (oh, ow) = self.original;
        let (fh, fw) = self.fitted;
        let (dy, dx) = self.offset;
        match self.mode {
            FitMode::Pad => {
                let mut out = Array3::zeros((s, fh, fw));
                out.slice_mut(s![.., dy..dy + oh, dx..dx + ow]).assign(v);
                out
            }
            FitMode::Crop => v.slice(s![.., dy..dy + fh, dx..dx + fw]).to_owned(),
        }
    }

    /// Maps fitted-geometry voxels back to the original slice geometry.
    /// Cropped borders come back as zeros.
    pub fn invert(&self, v: &Array3<f32>) -> Array3<f32> {
        let (s, _, _) = v.dim();
        let (oh, ow) = self.original;
        let (fh, fw) = self.fitted;
        let (dy, dx) = self.offset;
        match self.mode {
            FitMode::Pad => v.slice(s![.., dy..dy + oh, dx..dx + ow]).to_owned(),
            FitMode::Crop => {
                let mut out = Array3::zeros((s, oh, ow));
                out.slice_mut(s![.., dy..dy + fh, dx..dx + fw]).assign(v);
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_and_invert() {
        let v = Array3::from_shape_fn((2, 5, 7), |(a, b, c)| (a * 100 + b * 10 + c) as f32);
        let fit = SliceFit::plan(5, 7, 4, FitMode::Pad).unwrap();
        assert_eq!(fit.fitted, (8, 8));
        let padded = fit.apply(&v);
        assert_eq!(padded.dim(), (2, 8, 8));
        assert_eq!(fit.invert(&padded), v);
    }

    #[test]
    fn crop_and_invert() {
        let v = Array3::from_shape_fn((1, 10, 9), |(_, b, c)| (b * 10 + c) as f32 + 1.0);
        let fit = SliceFit::plan(10, 9, 4, FitMode::Crop).unwrap();
        assert_eq!(fit.fitted, (8, 8));
        let back = fit.invert(&fit.apply(&v));
        assert_eq!(back[[0, 1, 0]], v[[0, 1, 0]]);
        assert_eq!(back[[0, 0, 0]], 0.0);
        assert!(SliceFit::plan(3, 9, 4, FitMode::Crop).is_err());
    }

    #[test]
    fn volume_rejects_non_finite() {
        let mut a = Array3::<f32>::zeros((1, 2, 2));
        a[[0, 1, 1]] = f32::NAN;
        assert!(Volume::new(a, [1.0; 3]).is_err());
        assert!(Volume::new(Array3::zeros((0, 2, 2)), [1.0; 3]).is_err());
    }

    #[test]
    fn slice_pair_shapes_must_match() {
        assert!(SlicePair::new(Array2::zeros((2, 2)), Array2::zeros((2, 3)), 0, "s".into()).is_err());
        let p = SlicePair::new(Array2::ones((2, 2)), Array2::zeros((2, 2)), 0, "s".into()).unwrap();
        assert_eq!(p.noise(), Array2::<f32>::ones((2, 2)));
    }
}
