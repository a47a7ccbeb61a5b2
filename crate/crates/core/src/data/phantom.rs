//! Deterministic structured phantoms with known region masks.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

/// Peak intensity of every phantom kind (16-bit-like units).
pub const PHANTOM_AMPLITUDE: f32 = 10_000.0;

/// In-plane dimensions must be multiples of this (2^K for the default K = 4).
pub const PHANTOM_MULTIPLE: usize = 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    #[default]
    Ellipsoids,
    Checker,
    Blobs,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipsoids" => Ok(Self::Ellipsoids),
            "checker" => Ok(Self::Checker),
            "blobs" => Ok(Self::Blobs),
            other => Err(Error::Config(format!(
                "unknown phantom kind {other:?} (expected ellipsoids, checker or blobs)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub target: Array3<bool>,
    pub reference: Array3<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub masks: RegionMasks,
    /// Region id per voxel; `0` is outside every painted region.
    pub labels: Array3<u8>,
    /// Painted intensity of each region id (index 0 is the outside value).
    pub region_values: Vec<f32>,
}

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|i| ((p[i] - self.centre[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Voxel centre in normalised coordinates `[-1, 1]` per axis.
fn coords(idx: (usize, usize, usize), dims: (usize, usize, usize)) -> [f64; 3] {
    let n = |i: usize, d: usize| (2.0 * i as f64 + 1.0) / d as f64 - 1.0;
    [n(idx.0, dims.0), n(idx.1, dims.1), n(idx.2, dims.2)]
}

fn ellipsoids(dims: (usize, usize, usize), rng: &mut ChaCha8Rng) -> (Array3<u8>, Vec<f32>) {
    let j = |rng: &mut ChaCha8Rng, a: f64| rng.random_range(-a..=a);
    let head = Ellipsoid {
        centre: [0.0, j(rng, 0.04), j(rng, 0.04)],
        radii: [1.3, 0.85 + j(rng, 0.05), 0.7 + j(rng, 0.05)],
    };
    let inner = Ellipsoid {
        centre: head.centre,
        radii: [head.radii[0] * 0.75, head.radii[1] * 0.75, head.radii[2] * 0.72],
    };
    let reference = Ellipsoid {
        centre: [0.0, head.centre[1] + 0.5, head.centre[2] + j(rng, 0.05)],
        radii: [1.0, 0.2 + j(rng, 0.03), 0.3 + j(rng, 0.04)],
    };
    let bg = 0.0;
    let tissue = PHANTOM_AMPLITUDE * rng.random_range(0.18..0.26);
    let cortex = PHANTOM_AMPLITUDE * rng.random_range(0.55..0.95);
    let refv = PHANTOM_AMPLITUDE * rng.random_range(0.35..0.45);
    let mut values = vec![bg, tissue, cortex, refv];
    let mut spots = Vec::new();
    for _ in 0..rng.random_range(2..=4) {
        let c = [j(rng, 0.6), j(rng, 0.35), j(rng, 0.35)];
        let r = rng.random_range(0.08..0.16);
        spots.push(Ellipsoid {
            centre: [c[0] + head.centre[0], c[1] + head.centre[1], c[2] + head.centre[2]],
            radii: [r * 2.0, r, r * rng.random_range(0.8..1.25)],
        });
        values.push(PHANTOM_AMPLITUDE * rng.random_range(0.1..1.0));
    }
    let labels = Array3::from_shape_fn(dims, |idx| {
        let p = coords(idx, dims);
        if !head.contains(p) {
            return 0;
        }
        let mut id = if inner.contains(p) { 1 } else { 2 };
        if reference.contains(p) {
            id = 3;
        }
        for (k, s) in spots.iter().enumerate() {
            if s.contains(p) {
                id = 4 + k as u8;
            }
        }
        id
    });
    (labels, values)
}

fn checker(dims: (usize, usize, usize), rng: &mut ChaCha8Rng) -> (Array3<u8>, Vec<f32>) {
    let block = [4usize, 8][rng.random_range(0..2)];
    let phase = rng.random_range(0..2usize);
    let labels = Array3::from_shape_fn(dims, |(s, r, c)| {
        // cells flip with slice blocks too
        (((s / block) + (r / block) + (c / block) + phase) % 2) as u8 + 1
    });
    (labels, vec![0.0, PHANTOM_AMPLITUDE * 0.25, PHANTOM_AMPLITUDE])
}

fn blobs(dims: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f32> {
    let count = rng.random_range(4..=8);
    let blobs: Vec<([f64; 3], f64, f64)> = (0..count)
        .map(|_| {
            let c = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
            (c, rng.random_range(0.15..0.4), rng.random_range(0.3..1.0))
        })
        .collect();
    Array3::from_shape_fn(dims, |idx| {
        let p = coords(idx, dims);
        let v: f64 = blobs
            .iter()
            .map(|(c, w, a)| {
                let d2: f64 = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum();
                a * (-0.5 * d2 / (w * w)).exp()
            })
            .sum();
        PHANTOM_AMPLITUDE * v.min(1.0) as f32
    })
}

fn paint(labels: &Array3<u8>, values: &[f32]) -> Array3<f32> {
    labels.mapv(|id| values[id as usize])
}

/// Builds a phantom of `dims = [slices, rows, columns]` with the given voxel spacing.
pub fn make_phantom(kind: PhantomKind, dims: [usize; 3], spacing: [f64; 3], seed: u64) -> Result<Phantom> {
    let [s, h, w] = dims;
    if s == 0 || h == 0 || w == 0 || h % PHANTOM_MULTIPLE != 0 || w % PHANTOM_MULTIPLE != 0 {
        return Err(Error::Validation(format!(
            "invalid phantom dims {dims:?}: need >= 1 slice and rows/columns that are positive multiples of {PHANTOM_MULTIPLE}"
        )));
    }
    let dims3 = (s, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (voxels, labels, values, masks) = match kind {
        PhantomKind::Ellipsoids => {
            let (labels, values) = ellipsoids(dims3, &mut rng);
            let masks = RegionMasks {
                target: labels.mapv(|l| l == 2),
                reference: labels.mapv(|l| l == 3),
            };
            (paint(&labels, &values), labels, values, masks)
        }
        PhantomKind::Checker => {
            let (labels, values) = checker(dims3, &mut rng);
            let masks = RegionMasks {
                target: labels.mapv(|l| l == 2),
                reference: labels.mapv(|l| l == 1),
            };
            (paint(&labels, &values), labels, values, masks)
        }
        PhantomKind::Blobs => {
            let v = blobs(dims3, &mut rng);
            let hi = 0.5 * PHANTOM_AMPLITUDE;
            let lo = 0.05 * PHANTOM_AMPLITUDE;
            let masks = RegionMasks {
                target: v.mapv(|x| x > hi),
                reference: v.mapv(|x| x > lo && x <= 2.0 * lo),
            };
            let labels = v.mapv(|x| (x > lo) as u8);
            (v, labels, Vec::new(), masks)
        }
    };
    let mut volume = Volume::new(voxels, spacing)?;
    volume.intensity_units = "synthetic".into();
    Ok(Phantom {
        volume,
        masks,
        labels,
        region_values: values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SP: [f64; 3] = [2.0; 3];

    #[test]
    fn same_seed_same_phantom() {
        for kind in [PhantomKind::Ellipsoids, PhantomKind::Checker, PhantomKind::Blobs] {
            let a = make_phantom(kind, [4, 32, 32], SP, 5).unwrap();
            let b = make_phantom(kind, [4, 32, 32], SP, 5).unwrap();
            assert_eq!(a, b);
        }
        let a = make_phantom(PhantomKind::Ellipsoids, [4, 32, 32], SP, 5).unwrap();
        let c = make_phantom(PhantomKind::Ellipsoids, [4, 32, 32], SP, 6).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn ellipsoid_region_means_match_painted_values() {
        let p = make_phantom(PhantomKind::Ellipsoids, [8, 64, 64], SP, 1).unwrap();
        for (id, &want) in p.region_values.iter().enumerate() {
            let sel: Vec<f32> = p
                .volume
                .voxels
                .iter()
                .zip(p.labels.iter())
                .filter(|(_, &l)| l as usize == id)
                .map(|(v, _)| *v)
                .collect();
            if sel.is_empty() {
                continue;
            }
            let mean = sel.iter().map(|v| *v as f64).sum::<f64>() / sel.len() as f64;
            assert!((mean - want as f64).abs() < 1e-3, "region {id}: {mean} vs {want}");
        }
        assert!(p.masks.target.iter().any(|m| *m));
        assert!(p.masks.reference.iter().any(|m| *m));
        let ratio = crate::metrics::region_ratio(&p.volume.voxels, &p.masks.target, &p.masks.reference).unwrap();
        assert!((ratio - (p.region_values[2] / p.region_values[3]) as f64).abs() < 1e-5);
    }

    #[test]
    fn blobs_stay_in_range() {
        let p = make_phantom(PhantomKind::Blobs, [4, 32, 48], SP, 2).unwrap();
        assert!(p.volume.voxels.iter().all(|v| *v >= 0.0 && *v <= PHANTOM_AMPLITUDE));
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(make_phantom(PhantomKind::Checker, [4, 30, 32], SP, 0).is_err());
        assert!(make_phantom(PhantomKind::Checker, [0, 32, 32], SP, 0).is_err());
    }
}
