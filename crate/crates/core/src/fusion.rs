//! Explained-by-audio weighting, pixelwise fusion and the mask regularizer.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EbaProvenance {
    FromSegmentation,
    Uniform,
    Loaded,
}

/// Spatial weight in `[0, 1]` selecting the audio-driven estimate per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct EbAMap {
    w: Array2<f64>,
    provenance: EbaProvenance,
}

impl EbAMap {
    pub fn new(w: Array2<f64>, provenance: EbaProvenance) -> Result<Self> {
        check_unit_range(w.view(), "EbA map")?;
        Ok(Self { w, provenance })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(
            Array2::from_elem((height, width), value),
            EbaProvenance::Uniform,
        )
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn provenance(&self) -> EbaProvenance {
        self.provenance
    }

    pub fn dim(&self) -> (usize, usize) {
        self.w.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gridding,
    Wavelet,
    Tv,
    Sirem,
    SiremNoAudio,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Gridding,
        Method::Wavelet,
        Method::Tv,
        Method::Sirem,
        Method::SiremNoAudio,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Gridding => "gridding",
            Method::Wavelet => "wavelet",
            Method::Tv => "tv",
            Method::Sirem => "sirem",
            Method::SiremNoAudio => "sirem_no_audio",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

/// A reconstructed real-valued frame in `[0, 1]` with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconFrame {
    pub image: Array2<f64>,
    pub method: Method,
    pub frame_id: usize,
    pub wall_time_ms: f64,
}

impl ReconFrame {
    pub fn new(image: Array2<f64>, method: Method) -> Self {
        Self {
            image,
            method,
            frame_id: 0,
            wall_time_ms: 0.0,
        }
    }
}

pub(crate) fn check_unit_range(x: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    match x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::RangeViolation(format!(
            "{what} value {v} outside [0, 1]"
        ))),
        None => Ok(()),
    }
}

/// `w * xa + (1 - w) * xm`, pixelwise.
pub fn fuse(xa: &Array2<f64>, xm: &Array2<f64>, w: &EbAMap) -> Result<Array2<f64>> {
    if xa.dim() != xm.dim() || xa.dim() != w.dim() {
        return Err(Error::ShapeMismatch(format!(
            "fuse inputs {:?}, {:?}, weight {:?}",
            xa.dim(),
            xm.dim(),
            w.dim()
        )));
    }
    check_unit_range(xa.view(), "audio estimate")?;
    check_unit_range(xm.view(), "MRI estimate")?;
    Ok(fuse_unchecked(xa, xm, w.weights()))
}

pub(crate) fn fuse_unchecked(xa: &Array2<f64>, xm: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    Zip::from(xa).and(xm).and(w).map_collect(|&a, &m, &w| {
        let v = w * a + (1.0 - w) * m;
        // A convex combination lies between its endpoints; clamp away rounding.
        v.clamp(a.min(m), a.max(m))
    })
}

/// Normalized 1-D Gaussian taps over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with clamp-to-edge boundaries.
pub fn gaussian_blur(x: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as i64;
    let (h, w) = x.dim();
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let rows = Array2::from_shape_fn((h, w), |(i, j)| {
        taps.iter()
            .enumerate()
            .map(|(t, g)| g * x[[i, clamp(j as i64 + t as i64 - r, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        taps.iter()
            .enumerate()
            .map(|(t, g)| g * rows[[clamp(i as i64 + t as i64 - r, h), j]])
            .sum::<f64>()
    })
}

pub const DEFAULT_EBA_SIGMA: f64 = 2.0;

/// Union of binary articulator masks, Gaussian-smoothed and clipped to `[0, 1]`.
pub fn eba_from_segmentation(masks: &[ArrayView2<'_, u8>], sigma: f64) -> Result<EbAMap> {
    let first = masks
        .first()
        .ok_or_else(|| Error::EmptyInput("no segmentation masks given".into()))?;
    let dim = first.dim();
    let mut union = Array2::<f64>::zeros(dim);
    for m in masks {
        if m.dim() != dim {
            return Err(Error::ShapeMismatch(
                "segmentation masks differ in shape".into(),
            ));
        }
        if let Some(v) = m.iter().find(|v| **v > 1) {
            return Err(Error::RangeViolation(format!(
                "mask value {v} is not binary"
            )));
        }
        Zip::from(&mut union)
            .and(m)
            .for_each(|u, &v| *u = u.max(v as f64));
    }
    let w = gaussian_blur(&union, sigma).mapv(|v| v.clamp(0.0, 1.0));
    EbAMap::new(w, EbaProvenance::FromSegmentation)
}

fn complement_spectrum(w: &EbAMap) -> (Fft2, Vec<Complex64>, f64) {
    let (h, wd) = w.dim();
    let plan = Fft2::new(h, wd);
    let mut buf: Vec<Complex64> = w
        .weights()
        .iter()
        .map(|v| Complex64::new(1.0 - v, 0.0))
        .collect();
    plan.forward(&mut buf);
    let scale = 1.0 / ((h * wd) as f64).sqrt();
    buf.iter_mut().for_each(|z| *z *= scale);
    (plan, buf, scale)
}

/// Mean spectral energy of `1 - w` under the unitary 2-D DFT.
pub fn mask_loss(w: &EbAMap) -> f64 {
    let (_, spec, _) = complement_spectrum(w);
    spec.iter().map(|z| z.norm_sqr()).sum::<f64>() / spec.len() as f64
}

/// Gradient of [`mask_loss`] with respect to `w`, by back-propagating through the DFT.
pub fn mask_loss_grad(w: &EbAMap) -> Array2<f64> {
    let (plan, mut spec, scale) = complement_spectrum(w);
    let n = spec.len() as f64;
    // d/d(1-w) of mean |F c|^2 is (2/n) F^H F c; d(1-w)/dw = -1.
    plan.inverse(&mut spec);
    let (h, wd) = w.dim();
    Array2::from_shape_fn((h, wd), |(i, j)| -2.0 / n * spec[i * wd + j].re * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.random::<f64>())
    }

    #[test]
    fn fusion_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xa = random_unit(&mut rng, 5, 6);
        let xm = random_unit(&mut rng, 5, 6);
        assert_eq!(
            fuse(&xa, &xm, &EbAMap::uniform(5, 6, 1.0).unwrap()).unwrap(),
            xa
        );
        assert_eq!(
            fuse(&xa, &xm, &EbAMap::uniform(5, 6, 0.0).unwrap()).unwrap(),
            xm
        );
        let mid = fuse(
            &Array2::from_elem((3, 3), 0.2),
            &Array2::from_elem((3, 3), 0.6),
            &EbAMap::uniform(3, 3, 0.5).unwrap(),
        )
        .unwrap();
        assert!(mid.iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn fusion_rejects_bad_inputs() {
        let w = EbAMap::uniform(2, 2, 0.5).unwrap();
        let ok = Array2::from_elem((2, 2), 0.5);
        assert!(matches!(
            fuse(&Array2::zeros((2, 3)), &ok, &w),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            fuse(&Array2::from_elem((2, 2), 1.5), &ok, &w),
            Err(Error::RangeViolation(_))
        ));
        assert!(EbAMap::uniform(2, 2, -0.1).is_err());
    }

    #[test]
    fn segmentation_edge_cases() {
        let zeros = Array2::<u8>::zeros((10, 10));
        let w = eba_from_segmentation(&[zeros.view()], 2.0).unwrap();
        assert!(w.weights().iter().all(|v| *v == 0.0));
        let ones = Array2::<u8>::ones((10, 10));
        for sigma in [0.0, 0.7, 2.0, 5.0] {
            let w = eba_from_segmentation(&[zeros.view(), ones.view()], sigma).unwrap();
            assert!(w.weights().iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
        assert!(matches!(
            eba_from_segmentation(&[], 2.0),
            Err(Error::EmptyInput(_))
        ));
        let mut bad = zeros.clone();
        bad[[1, 1]] = 2;
        assert!(eba_from_segmentation(&[bad.view()], 1.0).is_err());
    }

    #[test]
    fn single_pixel_blur_matches_direct_convolution() {
        let n = 21;
        let mut m = Array2::<u8>::zeros((n, n));
        m[[10, 10]] = 1;
        let sigma = 2.0;
        let w = eba_from_segmentation(&[m.view()], sigma).unwrap();
        // Direct 2-D convolution with the unseparated Gaussian.
        let r = 6i64;
        let raw = |di: i64, dj: i64| (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
        let mut total = 0.0;
        for di in -r..=r {
            for dj in -r..=r {
                total += raw(di, dj);
            }
        }
        for i in 0..n {
            for j in 0..n {
                let (di, dj) = (i as i64 - 10, j as i64 - 10);
                let want = if di.abs() <= r && dj.abs() <= r {
                    raw(di, dj) / total
                } else {
                    0.0
                };
                assert!((w.weights()[[i, j]] - want).abs() < 1e-15);
            }
        }
        assert!((w.weights()[[10, 10]] - 1.0 / total).abs() < 1e-15);
    }

    #[test]
    fn mask_loss_closed_forms() {
        assert_eq!(mask_loss(&EbAMap::uniform(7, 9, 1.0).unwrap()), 0.0);
        for (h, w) in [(4, 4), (7, 9), (84, 84)] {
            let l = mask_loss(&EbAMap::uniform(h, w, 0.0).unwrap());
            assert!((l - 1.0).abs() < 1e-12, "{h}x{w}: {l}");
        }
    }

    #[test]
    fn mask_loss_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wmap = EbAMap::new(random_unit(&mut rng, 6, 5), EbaProvenance::Loaded).unwrap();
        let g = mask_loss_grad(&wmap);
        let n = 30.0;
        for ((i, j), gij) in g.indexed_iter() {
            let closed = -2.0 * (1.0 - wmap.weights()[[i, j]]) / n;
            assert!((gij - closed).abs() < 1e-12);
            let h = 1e-5;
            let mut plus = wmap.weights().clone();
            plus[[i, j]] += h;
            let mut minus = wmap.weights().clone();
            minus[[i, j]] -= h;
            let fd = (mask_loss(&EbAMap {
                w: plus,
                provenance: EbaProvenance::Loaded,
            }) - mask_loss(&EbAMap {
                w: minus,
                provenance: EbaProvenance::Loaded,
            })) / (2.0 * h);
            assert!((gij - fd).abs() < 1e-6);
        }
        assert!(mask_loss_grad(&EbAMap::uniform(3, 3, 1.0).unwrap())
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("cg".parse::<Method>().is_err());
    }

    proptest! {
        #[test]
        fn fused_output_stays_in_unit_range(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xa = random_unit(&mut rng, 8, 8);
            let xm = random_unit(&mut rng, 8, 8);
            let w = EbAMap::new(random_unit(&mut rng, 8, 8), EbaProvenance::Loaded).unwrap();
            let out = fuse(&xa, &xm, &w).unwrap();
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn fusion_is_linear_in_estimates(seed in any::<u64>(), a in 0.0f64..0.5, b in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (xa1, xa2) = (random_unit(&mut rng, 4, 4), random_unit(&mut rng, 4, 4));
            let (xm1, xm2) = (random_unit(&mut rng, 4, 4), random_unit(&mut rng, 4, 4));
            let w = EbAMap::new(random_unit(&mut rng, 4, 4), EbaProvenance::Loaded).unwrap();
            let lhs = fuse(&(&xa1 * a + &xa2 * b), &(&xm1 * a + &xm2 * b), &w).unwrap();
            let rhs = fuse(&xa1, &xm1, &w).unwrap() * a + fuse(&xa2, &xm2, &w).unwrap() * b;
            prop_assert!(lhs.iter().zip(&rhs).all(|(l, r)| (l - r).abs() < 1e-12));
        }

        #[test]
        fn mask_loss_is_mean_squared_complement(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = EbAMap::new(random_unit(&mut rng, 9, 12), EbaProvenance::Loaded).unwrap();
            let direct = w.weights().iter().map(|v| (1.0 - v).powi(2)).sum::<f64>() / 108.0;
            let l = mask_loss(&w);
            prop_assert!((l - direct).abs() < 1e-10);
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn blurred_union_in_unit_range(bits in proptest::collection::vec(0u8..2, 144), sigma in 0.0f64..4.0) {
            let m = Array2::from_shape_vec((12, 12), bits).unwrap();
            let w = eba_from_segmentation(&[m.view()], sigma).unwrap();
            prop_assert!(w.weights().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
