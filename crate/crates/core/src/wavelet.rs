//! Orthonormal single-level 2-D Haar transform.
//!
//! For every 2x2 block `[a b; c d]` of the source image:
//!
//! ```text
//! ll = (a + b + c + d) / 2      lh = (a + b - c - d) / 2
//! hl = (a - b + c - d) / 2      hh = (a - b - c + d) / 2
//! ```
//!
//! The 1/2 factor makes the transform orthonormal, so energy is preserved and
//! the inverse uses the same coefficients. The array functions here work on
//! `ndarray` images; the `*_tensor` variants are the differentiable versions
//! used inside the generator and operate on `(batch, channel, H, W)` tensors.

use candle_core::{Tensor, D};
use ndarray::{Array2, ArrayView2};
use num_traits::Float;

use crate::error::{Error, Result};

/// The four subbands of a single decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet<T> {
    pub ll: Array2<T>,
    pub lh: Array2<T>,
    pub hl: Array2<T>,
    pub hh: Array2<T>,
}

impl<T: Float> SubbandSet<T> {
    pub fn dim(&self) -> (usize, usize) {
        self.ll.dim()
    }

    /// Sum of squared coefficients over all four subbands.
    pub fn energy(&self) -> T {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .flat_map(|b| b.iter())
            .fold(T::zero(), |acc, &v| acc + v * v)
    }
}

pub fn haar_decompose<T: Float>(image: ArrayView2<'_, T>) -> Result<SubbandSet<T>> {
    let (h, w) = image.dim();
    if h % 2 != 0 {
        return Err(Error::Dimension(format!(
            "haar_decompose: row axis has odd length {h}"
        )));
    }
    if w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "haar_decompose: column axis has odd length {w}"
        )));
    }
    let half = T::from(0.5).unwrap();
    let (oh, ow) = (h / 2, w / 2);
    let mut ll = Array2::zeros((oh, ow));
    let mut lh = Array2::zeros((oh, ow));
    let mut hl = Array2::zeros((oh, ow));
    let mut hh = Array2::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let a = image[[2 * i, 2 * j]];
            let b = image[[2 * i, 2 * j + 1]];
            let c = image[[2 * i + 1, 2 * j]];
            let d = image[[2 * i + 1, 2 * j + 1]];
            ll[[i, j]] = (a + b + c + d) * half;
            lh[[i, j]] = (a + b - c - d) * half;
            hl[[i, j]] = (a - b + c - d) * half;
            hh[[i, j]] = (a - b - c + d) * half;
        }
    }
    Ok(SubbandSet { ll, lh, hl, hh })
}

pub fn haar_reconstruct<T: Float>(subbands: &SubbandSet<T>) -> Result<Array2<T>> {
    let shape = subbands.ll.dim();
    for (name, band) in [("lh", &subbands.lh), ("hl", &subbands.hl), ("hh", &subbands.hh)] {
        if band.dim() != shape {
            return Err(Error::Dimension(format!(
                "haar_reconstruct: subband {name} has shape {:?}, ll has {:?}",
                band.dim(),
                shape
            )));
        }
    }
    let half = T::from(0.5).unwrap();
    let (oh, ow) = shape;
    let mut out = Array2::zeros((2 * oh, 2 * ow));
    for i in 0..oh {
        for j in 0..ow {
            let ll = subbands.ll[[i, j]];
            let lh = subbands.lh[[i, j]];
            let hl = subbands.hl[[i, j]];
            let hh = subbands.hh[[i, j]];
            out[[2 * i, 2 * j]] = (ll + lh + hl + hh) * half;
            out[[2 * i, 2 * j + 1]] = (ll + lh - hl - hh) * half;
            out[[2 * i + 1, 2 * j]] = (ll - lh + hl - hh) * half;
            out[[2 * i + 1, 2 * j + 1]] = (ll - lh - hl + hh) * half;
        }
    }
    Ok(out)
}

/// Tensor subbands, each `(B, C, H/2, W/2)`.
#[derive(Debug, Clone)]
pub struct TensorSubbands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

/// Differentiable Haar decomposition of a `(B, C, H, W)` tensor.
pub fn haar_decompose_tensor(x: &Tensor) -> Result<TensorSubbands> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "haar_decompose_tensor: spatial dims ({h}, {w}) must be even"
        )));
    }
    let blocks = x.reshape((b, c, h / 2, 2, w / 2, 2))?;
    let pick = |r: usize, s: usize| -> Result<Tensor> {
        Ok(blocks
            .narrow(3, r, 1)?
            .narrow(5, s, 1)?
            .squeeze(5)?
            .squeeze(3)?
            .contiguous()?)
    };
    let (a, bb, cc, d) = (pick(0, 0)?, pick(0, 1)?, pick(1, 0)?, pick(1, 1)?);
    let ll = (((&a + &bb)? + (&cc + &d)?)? * 0.5)?;
    let lh = (((&a + &bb)? - (&cc + &d)?)? * 0.5)?;
    let hl = (((&a - &bb)? + (&cc - &d)?)? * 0.5)?;
    let hh = (((&a - &bb)? - (&cc - &d)?)? * 0.5)?;
    Ok(TensorSubbands { ll, lh, hl, hh })
}

/// Differentiable inverse of [`haar_decompose_tensor`].
pub fn haar_reconstruct_tensor(s: &TensorSubbands) -> Result<Tensor> {
    let shape = s.ll.dims().to_vec();
    for band in [&s.lh, &s.hl, &s.hh] {
        if band.dims() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "haar_reconstruct_tensor: subband shape {:?} != ll shape {:?}",
                band.dims(),
                shape
            )));
        }
    }
    let (b, c, h, w) = s.ll.dims4()?;
    let sum_lo = (&s.ll + &s.lh)?;
    let dif_lo = (&s.ll - &s.lh)?;
    let sum_hi = (&s.hl + &s.hh)?;
    let dif_hi = (&s.hl - &s.hh)?;
    let a = ((&sum_lo + &sum_hi)? * 0.5)?;
    let bb = ((&sum_lo - &sum_hi)? * 0.5)?;
    let cc = ((&dif_lo + &dif_hi)? * 0.5)?;
    let d = ((&dif_lo - &dif_hi)? * 0.5)?;
    let top = Tensor::stack(&[&a, &bb], D::Minus1)?.reshape((b, c, h, 2 * w))?;
    let bottom = Tensor::stack(&[&cc, &d], D::Minus1)?.reshape((b, c, h, 2 * w))?;
    Ok(Tensor::stack(&[&top, &bottom], 3)?.reshape((b, c, 2 * h, 2 * w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use candle_core::{DType, Device};
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn constant_block_keeps_only_dc() {
        let s = haar_decompose(array![[1.0, 1.0], [1.0, 1.0]].view()).unwrap();
        assert_eq!(s.ll, array![[2.0]]);
        assert_eq!(s.lh, array![[0.0]]);
        assert_eq!(s.hl, array![[0.0]]);
        assert_eq!(s.hh, array![[0.0]]);
    }

    #[test]
    fn column_alternation_lands_in_hl() {
        let s = haar_decompose(array![[1.0, -1.0], [1.0, -1.0]].view()).unwrap();
        assert_eq!(s.ll, array![[0.0]]);
        assert_eq!(s.hl, array![[2.0]]);
        assert_eq!(s.lh, array![[0.0]]);
        assert_eq!(s.hh, array![[0.0]]);
    }

    #[test]
    fn reconstruct_dc_block() {
        let s = SubbandSet {
            ll: array![[2.0]],
            lh: array![[0.0]],
            hl: array![[0.0]],
            hh: array![[0.0]],
        };
        assert_eq!(haar_reconstruct(&s).unwrap(), array![[1.0, 1.0], [1.0, 1.0]]);
        let zeros = SubbandSet {
            ll: Array2::<f64>::zeros((3, 2)),
            lh: Array2::zeros((3, 2)),
            hl: Array2::zeros((3, 2)),
            hh: Array2::zeros((3, 2)),
        };
        assert_eq!(haar_reconstruct(&zeros).unwrap(), Array2::<f64>::zeros((6, 4)));
    }

    #[test]
    fn odd_dimensions_name_the_axis() {
        let err = haar_decompose(Array2::<f32>::zeros((3, 4)).view()).unwrap_err();
        assert!(err.to_string().contains("row axis"), "{err}");
        let err = haar_decompose(Array2::<f32>::zeros((4, 5)).view()).unwrap_err();
        assert!(err.to_string().contains("column axis"), "{err}");
    }

    #[test]
    fn mismatched_subbands_rejected() {
        let s = SubbandSet {
            ll: Array2::<f64>::zeros((2, 2)),
            lh: Array2::zeros((2, 2)),
            hl: Array2::zeros((2, 3)),
            hh: Array2::zeros((2, 2)),
        };
        assert!(matches!(haar_reconstruct(&s), Err(Error::Dimension(_))));
    }

    #[test]
    fn tensor_route_matches_array_route() {
        let dev = Device::Cpu;
        let img = Array2::from_shape_fn((6, 8), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 1.5 + 0.1 * j as f64);
        let t = Tensor::from_slice(img.as_slice().unwrap(), (1, 1, 6, 8), &dev).unwrap();
        let ts = haar_decompose_tensor(&t).unwrap();
        let s = haar_decompose(img.view()).unwrap();
        for (tb, ab) in [(&ts.ll, &s.ll), (&ts.lh, &s.lh), (&ts.hl, &s.hl), (&ts.hh, &s.hh)] {
            let v: Vec<f64> = tb.flatten_all().unwrap().to_vec1().unwrap();
            for (x, y) in v.iter().zip(ab.iter()) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
            }
        }
        let back: Vec<f64> = haar_reconstruct_tensor(&ts)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        for (x, y) in back.iter().zip(img.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn tensor_round_trip_batched() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1., (3, 2, 8, 4), &dev).unwrap();
        let y = haar_reconstruct_tensor(&haar_decompose_tensor(&x).unwrap()).unwrap();
        let err = (x - y).unwrap().abs().unwrap().max_all().unwrap().to_dtype(DType::F32).unwrap();
        assert!(err.to_scalar::<f32>().unwrap() < 1e-5);
    }

    fn even_image() -> impl Strategy<Value = Array2<f64>> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            proptest::collection::vec(-100.0f64..100.0, 4 * h * w)
                .prop_map(move |v| Array2::from_shape_vec((2 * h, 2 * w), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_and_energy(x in even_image()) {
            let s = haar_decompose(x.view()).unwrap();
            let back = haar_reconstruct(&s).unwrap();
            let err = (&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(err <= 1e-10);
            let e0: f64 = x.iter().map(|v| v * v).sum();
            prop_assert!((s.energy() - e0).abs() <= 1e-10 * e0.max(1.0));
        }

        #[test]
        fn decompose_is_linear(x in even_image(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let y = x.mapv(|v| (v * 0.37).sin() * 10.0);
            let lhs = haar_decompose((&x * alpha + &y * beta).view()).unwrap();
            let sx = haar_decompose(x.view()).unwrap();
            let sy = haar_decompose(y.view()).unwrap();
            for (l, (a, b)) in [(&lhs.ll, (&sx.ll, &sy.ll)), (&lhs.lh, (&sx.lh, &sy.lh)),
                                (&lhs.hl, (&sx.hl, &sy.hl)), (&lhs.hh, (&sx.hh, &sy.hh))] {
                let expect = a * alpha + b * beta;
                for (p, q) in l.iter().zip(expect.iter()) {
                    prop_assert!((p - q).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn subbands_round_trip(v in proptest::collection::vec(-5.0f64..5.0, 4 * 6)) {
            let band = |k: usize| Array2::from_shape_vec((2, 3), v[6 * k..6 * k + 6].to_vec()).unwrap();
            let s = SubbandSet { ll: band(0), lh: band(1), hl: band(2), hh: band(3) };
            let again = haar_decompose(haar_reconstruct(&s).unwrap().view()).unwrap();
            for (p, q) in [(&s.ll, &again.ll), (&s.lh, &again.lh), (&s.hl, &again.hl), (&s.hh, &again.hh)] {
                for (a, b) in p.iter().zip(q.iter()) {
                    prop_assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }
}
