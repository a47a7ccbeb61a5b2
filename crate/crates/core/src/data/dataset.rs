//! Multi-domain paired dataset assembly and its on-disk manifest.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    default_domains, load_volume, make_phantom, mixture_domain, save_volume, synthesize_domain, DomainSpec,
    PhantomKind, RegionMasks, SlicePair, Volume,
};
use crate::error::{Error, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const DATASET_MANIFEST_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    /// Subjects of a held-out mixture domain.
    Calibration,
}

/// A held-out domain interpolated between two training domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub name: String,
    pub from: usize,
    pub to: usize,
    pub alpha: f64,
    pub subjects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub domains: Vec<DomainSpec>,
    pub subjects_per_domain: Vec<usize>,
    /// `[slices, rows, columns]`.
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub val_fraction: f64,
    pub phantom: PhantomKind,
    pub seed: u64,
    /// Held-out domains; their subjects get indices after the training
    /// domains and the `Calibration` split.
    pub mixtures: Vec<MixtureSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            domains: default_domains(3).expect("three default domains"),
            subjects_per_domain: vec![18, 15, 12],
            dims: [16, 32, 32],
            spacing: [2.0, 2.0, 2.0],
            val_fraction: 0.2,
            phantom: PhantomKind::Ellipsoids,
            seed: 0,
            mixtures: Vec::new(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.domains.len();
        if n == 0 {
            return Err(Error::Validation("dataset needs at least one domain".into()));
        }
        let mut seen = BTreeSet::new();
        for d in &self.domains {
            if !seen.insert(d.index) {
                return Err(Error::Validation(format!("duplicate domain index {}", d.index)));
            }
        }
        for d in &self.domains {
            d.validate(n)?;
        }
        if self.subjects_per_domain.len() != n {
            return Err(Error::Validation(format!(
                "subjects_per_domain has {} entries for {n} domains",
                self.subjects_per_domain.len()
            )));
        }
        let mut names: BTreeSet<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        if names.len() != n {
            return Err(Error::Validation("domain names must be unique".into()));
        }
        for m in &self.mixtures {
            if m.from >= n || m.to >= n {
                return Err(Error::Validation(format!(
                    "mixture {} interpolates domains {} and {}, only {n} exist",
                    m.name, m.from, m.to
                )));
            }
            if !names.insert(&m.name) {
                return Err(Error::Validation(format!("duplicate domain name {}", m.name)));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Validation(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    /// Degradation of every mixture, indexed after the training domains.
    pub fn mixture_domains(&self) -> Result<Vec<DomainSpec>> {
        let n = self.domains.len();
        self.mixtures
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let a = self.domains.iter().find(|d| d.index == m.from).ok_or_else(|| {
                    Error::Validation(format!("mixture {}: no domain {}", m.name, m.from))
                })?;
                let b = self.domains.iter().find(|d| d.index == m.to).ok_or_else(|| {
                    Error::Validation(format!("mixture {}: no domain {}", m.name, m.to))
                })?;
                let mut spec = mixture_domain(a, b, m.alpha, &m.name)?;
                spec.index = n + j;
                Ok(spec)
            })
            .collect()
    }
}

/// One synthetic subject imaged in one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub domain_index: usize,
    pub split: Split,
    pub seed: u64,
    pub short: Volume,
    pub standard: Volume,
    pub masks: RegionMasks,
}

impl Subject {
    pub fn pairs(&self) -> Vec<SlicePair> {
        (0..self.short.dim().0)
            .map(|k| SlicePair {
                z: self.short.slice(k),
                x: self.standard.slice(k),
                domain_index: self.domain_index,
                subject_id: self.id.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub domain_index: usize,
    pub split: Split,
    pub seed: u64,
    pub short: String,
    pub standard: String,
    pub target_mask: String,
    pub reference_mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: DatasetConfig,
    pub subjects: Vec<SubjectRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn domain_count(&self) -> usize {
        self.config.domains.len()
    }

    pub fn subjects_in(&self, domain: usize, split: Option<Split>) -> impl Iterator<Item = &Subject> {
        self.subjects
            .iter()
            .filter(move |s| s.domain_index == domain && split.is_none_or(|sp| s.split == sp))
    }

    /// Slice pairs per domain, indexed by domain index.
    pub fn domain_pairs(&self, split: Option<Split>) -> Vec<Vec<SlicePair>> {
        (0..self.domain_count())
            .map(|d| self.subjects_in(d, split).flat_map(Subject::pairs).collect())
            .collect()
    }

    /// Description of a training or mixture domain by index.
    pub fn domain(&self, index: usize) -> Result<DomainSpec> {
        if let Some(d) = self.config.domains.iter().find(|d| d.index == index) {
            return Ok(d.clone());
        }
        self.config
            .mixture_domains()?
            .into_iter()
            .find(|d| d.index == index)
            .ok_or_else(|| Error::Validation(format!("dataset has no domain {index}")))
    }

    /// Slice pairs of any domain (training or mixture).
    pub fn pairs_of(&self, domain: usize, split: Option<Split>) -> Vec<SlicePair> {
        self.subjects_in(domain, split).flat_map(Subject::pairs).collect()
    }

    pub fn domain_sizes(&self, split: Option<Split>) -> Vec<usize> {
        self.domain_pairs(split).iter().map(Vec::len).collect()
    }
}

fn subject_id(domain: &DomainSpec, k: usize) -> String {
    format!("{}-{k:03}", domain.name)
}

/// Synthesises `count` subjects of one domain; subject `k` uses seed `seed + k`.
pub fn synthesize_subjects(
    domain: &DomainSpec,
    count: usize,
    kind: PhantomKind,
    dims: [usize; 3],
    spacing: [f64; 3],
    seed: u64,
) -> Result<Vec<Subject>> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let s = seed.wrapping_add(k as u64);
            let phantom = make_phantom(kind, dims, spacing, s)?;
            let (short, standard) = synthesize_domain(&phantom.volume, domain, s ^ 0x5eed_0f_c0ff_ee00)?;
            Ok(Subject {
                id: subject_id(domain, k),
                domain_index: domain.index,
                split: Split::Train,
                seed: s,
                short,
                standard,
                masks: phantom.masks,
            })
        })
        .collect()
}

fn split_for_domain(n: usize, val_fraction: f64, seed: u64, domain: usize) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (domain as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let mut out = vec![Split::Train; n];
    for &i in &idx[..n_val.min(n)] {
        out[i] = Split::Val;
    }
    out
}

pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let mut subjects = Vec::new();
    let mut offset = 0u64;
    for (d, &count) in config.domains.iter().zip(&config.subjects_per_domain) {
        let mut subs = synthesize_subjects(
            d,
            count,
            config.phantom,
            config.dims,
            config.spacing,
            config.seed.wrapping_add(offset),
        )?;
        for (s, split) in subs.iter_mut().zip(split_for_domain(count, config.val_fraction, config.seed, d.index)) {
            s.split = split;
        }
        subjects.extend(subs);
        offset += count as u64;
    }
    for (spec, m) in config.mixture_domains()?.iter().zip(&config.mixtures) {
        let mut subs = synthesize_subjects(
            spec,
            m.subjects,
            config.phantom,
            config.dims,
            config.spacing,
            config.seed.wrapping_add(offset),
        )?;
        for s in &mut subs {
            s.split = Split::Calibration;
        }
        subjects.extend(subs);
        offset += m.subjects as u64;
    }
    Ok(Dataset {
        config: config.clone(),
        subjects,
    })
}

fn mask_volume(mask: &ndarray::Array3<bool>, spacing: [f64; 3]) -> Result<Volume> {
    let mut v = Volume::new(mask.mapv(|m| m as u8 as f32), spacing)?;
    v.intensity_units = "mask".into();
    Ok(v)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path, config_hash: Option<String>) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(dataset.subjects.len());
    for s in &dataset.subjects {
        let base = format!("subjects/{}", s.id);
        let rec = SubjectRecord {
            id: s.id.clone(),
            domain_index: s.domain_index,
            split: s.split,
            seed: s.seed,
            short: format!("{base}/short"),
            standard: format!("{base}/standard"),
            target_mask: format!("{base}/target_mask"),
            reference_mask: format!("{base}/reference_mask"),
        };
        save_volume(&s.short, &dir.join(&rec.short))?;
        save_volume(&s.standard, &dir.join(&rec.standard))?;
        save_volume(&mask_volume(&s.masks.target, s.short.spacing)?, &dir.join(&rec.target_mask))?;
        save_volume(&mask_volume(&s.masks.reference, s.short.spacing)?, &dir.join(&rec.reference_mask))?;
        records.push(rec);
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        config: dataset.config.clone(),
        subjects: records,
        config_hash,
    };
    let path = dir.join(DATASET_MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(DATASET_MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::ingestion(&path, format!("malformed dataset manifest: {e}")))?;
    if m.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::ingestion(&path, format!("unsupported schema version {}", m.schema_version)));
    }
    m.config.validate()?;
    let subjects = m
        .subjects
        .iter()
        .map(|r| {
            let mask = |p: &str| -> Result<ndarray::Array3<bool>> {
                Ok(load_volume(&dir.join(p))?.voxels.mapv(|v| v > 0.5))
            };
            Ok(Subject {
                id: r.id.clone(),
                domain_index: r.domain_index,
                split: r.split,
                seed: r.seed,
                short: load_volume(&dir.join(&r.short))?,
                standard: load_volume(&dir.join(&r.standard))?,
                masks: RegionMasks {
                    target: mask(&r.target_mask)?,
                    reference: mask(&r.reference_mask)?,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: m.config,
        subjects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::domain_weights;

    fn small(subjects: Vec<usize>, seed: u64) -> DatasetConfig {
        DatasetConfig {
            subjects_per_domain: subjects,
            dims: [16, 16, 16],
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_domain_indices() {
        let ds = build_dataset(&small(vec![4, 4, 4], 1)).unwrap();
        let pairs = ds.domain_pairs(None);
        assert_eq!(pairs.iter().map(Vec::len).sum::<usize>(), 192);
        for (d, ps) in pairs.iter().enumerate() {
            assert!(ps.iter().all(|p| p.domain_index == d));
            assert!(ps.iter().all(|p| p.z.dim() == p.x.dim() && p.x.iter().all(|v| *v >= 0.0)));
        }
    }

    #[test]
    fn imbalanced_weights_sum_to_one() {
        let ds = build_dataset(&small(vec![8, 4, 2], 2)).unwrap();
        let sizes = ds.domain_sizes(Some(Split::Train));
        assert!(sizes[0] > sizes[1] && sizes[1] > sizes[2]);
        let w = domain_weights(&sizes).unwrap();
        assert!((w.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_is_reproducible() {
        let a = build_dataset(&small(vec![5, 5, 5], 3)).unwrap();
        let b = build_dataset(&small(vec![5, 5, 5], 3)).unwrap();
        let ids = |d: &Dataset| d.subjects.iter().map(|s| (s.id.clone(), s.split)).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        assert_eq!(a, b);
        assert!(a.subjects.iter().any(|s| s.split == Split::Val));
    }

    #[test]
    fn duplicate_domain_index_rejected() {
        let mut cfg = small(vec![1, 1, 1], 0);
        cfg.domains[2].index = 1;
        assert!(matches!(build_dataset(&cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn mixture_subjects_are_held_out() {
        let mut cfg = small(vec![1, 1, 1], 5);
        cfg.mixtures.push(MixtureSpec { name: "mix01".into(), from: 0, to: 1, alpha: 0.5, subjects: 2 });
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!(ds.domain_sizes(None), vec![16, 16, 16]);
        let mix: Vec<_> = ds.subjects_in(3, None).collect();
        assert_eq!(mix.len(), 2);
        assert!(mix.iter().all(|s| s.split == Split::Calibration));
        let spec = ds.domain(3).unwrap();
        assert!((spec.psf_fwhm_mm - 3.0).abs() < 1e-12);
        cfg.mixtures[0].to = 7;
        assert!(build_dataset(&cfg).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&small(vec![2, 1, 1], 4)).unwrap();
        save_dataset(&ds, dir.path(), Some("abc".into())).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }
}
