//! Coil sensitivities, k-space normalization and SENSE-weighted combination.

use std::f64::consts::PI;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{Method, ReconFrame};
use crate::nufft::{ComplexImage, NufftPlan};
use crate::trajectory::GridSize;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Block size for the Walsh covariance window.
pub const WALSH_BLOCK: usize = 8;
/// Power-iteration steps for the dominant covariance eigenvector.
pub const WALSH_POWER_STEPS: usize = 30;

/// Complex sensitivity maps `[C, H, W]` with unit (or zero) root-sum-of-squares per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMaps {
    maps: Array3<Complex64>,
}

impl SensitivityMaps {
    /// Normalizes raw profiles so that `sum_c |S_c|^2` is 1 wherever it is nonzero.
    pub fn normalized(mut maps: Array3<Complex64>) -> Self {
        let (_, h, w) = maps.dim();
        for i in 0..h {
            for j in 0..w {
                let mut col = maps.slice_mut(s![.., i, j]);
                let sos = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                if sos > 0.0 {
                    col.mapv_inplace(|z| z / sos);
                }
            }
        }
        Self { maps }
    }

    /// Wraps maps that are already normalized, checking the invariant.
    pub fn from_normalized(maps: Array3<Complex64>) -> Result<Self> {
        let (_, h, w) = maps.dim();
        for i in 0..h {
            for j in 0..w {
                let sos: f64 = maps.slice(s![.., i, j]).iter().map(|z| z.norm_sqr()).sum();
                if sos != 0.0 && (sos - 1.0).abs() > 1e-6 {
                    return Err(Error::RangeViolation(format!(
                        "sensitivity sum-of-squares {sos} at ({i}, {j}) is neither 0 nor 1"
                    )));
                }
            }
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &Array3<Complex64> {
        &self.maps
    }

    pub fn coils(&self) -> usize {
        self.maps.dim().0
    }

    pub fn grid(&self) -> GridSize {
        let (_, h, w) = self.maps.dim();
        GridSize::new(h, w)
    }

    pub fn coil(&self, c: usize) -> ArrayView2<'_, Complex64> {
        self.maps.index_axis(Axis(0), c)
    }
}

/// One frame of multi-coil k-space `[C, arms, samples]`, max-magnitude normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceFrame {
    data: Array3<Complex64>,
    norm_scale: f64,
    acquired: Vec<bool>,
}

impl KSpaceFrame {
    /// Wraps already-normalized data.
    pub fn from_normalized(data: Array3<Complex64>, norm_scale: f64) -> Result<Self> {
        if !(norm_scale > 0.0 && norm_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "norm_scale must be positive, got {norm_scale}"
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("k-space frame".into()));
        }
        if data.iter().any(|z| z.norm() > 1.0 + 1e-9) {
            return Err(Error::RangeViolation(
                "normalized k-space exceeds unit magnitude".into(),
            ));
        }
        let arms = data.dim().1;
        Ok(Self {
            data,
            norm_scale,
            acquired: vec![true; arms],
        })
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn norm_scale(&self) -> f64 {
        self.norm_scale
    }

    pub fn coils(&self) -> usize {
        self.data.dim().0
    }

    pub fn arms(&self) -> usize {
        self.data.dim().1
    }

    /// Arms that carry measured data.
    pub fn acquired(&self) -> &[bool] {
        &self.acquired
    }

    pub fn coil(&self, c: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(Axis(0), c)
    }

    /// Keeps only the listed arms; all others are zeroed and marked unacquired.
    pub fn retain_arms(&self, arms: &[usize]) -> Result<Self> {
        let n = self.arms();
        if let Some(a) = arms.iter().find(|a| **a >= n) {
            return Err(Error::InvalidArgument(format!(
                "arm {a} out of range for {n} arms"
            )));
        }
        let mut out = self.clone();
        for i in 0..n {
            let keep = arms.contains(&i) && self.acquired[i];
            out.acquired[i] = keep;
            if !keep {
                out.data.slice_mut(s![.., i, ..]).fill(ZERO);
            }
        }
        Ok(out)
    }

    pub(crate) fn with_data(&self, data: Array3<Complex64>) -> Self {
        Self {
            data,
            norm_scale: self.norm_scale,
            acquired: self.acquired.clone(),
        }
    }
}

/// Divides raw k-space by its maximum magnitude.
pub fn normalize_kspace(raw: Array3<Complex64>) -> Result<KSpaceFrame> {
    let max = raw.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("raw k-space".into()));
    }
    if max == 0.0 {
        return Err(Error::AllZeroInput);
    }
    let data = raw.mapv(|z| z / max);
    let arms = data.dim().1;
    Ok(KSpaceFrame {
        data,
        norm_scale: max,
        acquired: vec![true; arms],
    })
}

/// Smooth synthetic receive profiles: Gaussian bumps on a ring around the
/// field of view with a gentle linear phase, then sum-of-squares normalized.
pub fn simulate_sensitivities(coils: usize, grid: GridSize, seed: u64) -> Result<SensitivityMaps> {
    if coils == 0 {
        return Err(Error::InvalidArgument(
            "at least one coil is required".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = grid.dim();
    let (ch, cw) = (h as f64 / 2.0, w as f64 / 2.0);
    let ring = 0.75 * ch.max(cw);
    let width = 1.2 * ch.max(cw);
    let mut maps = Array3::zeros((coils, h, w));
    for c in 0..coils {
        let angle = 2.0 * PI * c as f64 / coils as f64 + rng.random_range(-0.2..0.2);
        let (cy, cx) = (ch + ring * angle.sin(), cw + ring * angle.cos());
        let (py, px) = (
            rng.random_range(-0.25..0.25) * PI / h as f64,
            rng.random_range(-0.25..0.25) * PI / w as f64,
        );
        let phase0 = rng.random_range(-PI..PI);
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                let mag = (-d2 / (2.0 * width * width)).exp();
                maps[[c, i, j]] =
                    Complex64::from_polar(mag, phase0 + py * i as f64 + px * j as f64);
            }
        }
    }
    Ok(SensitivityMaps::normalized(maps))
}

/// Walsh adaptive estimate: dominant eigenvector of the local coil covariance.
pub fn walsh_estimate(coil_images: &Array3<Complex64>, block: usize) -> Result<SensitivityMaps> {
    let (coils, h, w) = coil_images.dim();
    if coils == 0 || block == 0 {
        return Err(Error::InvalidArgument(
            "walsh needs at least one coil and a positive block".into(),
        ));
    }
    let rows: Vec<Vec<Vec<Complex64>>> = (0..h)
        .into_par_iter()
        .map(|i| {
            let (r0, r1) = walsh_window(i, h, block);
            (0..w)
                .map(|j| {
                    let (c0, c1) = walsh_window(j, w, block);
                    let mut cov = vec![ZERO; coils * coils];
                    for r in r0..r1 {
                        for c in c0..c1 {
                            for a in 0..coils {
                                let xa = coil_images[[a, r, c]];
                                for b in 0..coils {
                                    cov[a * coils + b] += xa * coil_images[[b, r, c]].conj();
                                }
                            }
                        }
                    }
                    dominant_eigenvector(&cov, coils)
                })
                .collect()
        })
        .collect();
    let mut maps = Array3::zeros((coils, h, w));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            for (c, z) in v.into_iter().enumerate() {
                maps[[c, i, j]] = z;
            }
        }
    }
    Ok(SensitivityMaps { maps })
}

/// Half-open window of `block` samples around `i`. Near an edge the window
/// shrinks symmetrically instead of being clipped on one side only.
fn walsh_window(i: usize, n: usize, block: usize) -> (usize, usize) {
    let back = block / 2;
    let fwd = block - back - 1;
    if i >= back && i + fwd < n {
        (i - back, i + fwd + 1)
    } else {
        let d = i.min(n - 1 - i).min(back);
        (i - d, i + d + 1)
    }
}

/// Unit-norm dominant eigenvector of a Hermitian `n x n` matrix, phase-referenced
/// so that its first entry is real and non-negative. Zero matrix gives zero.
fn dominant_eigenvector(cov: &[Complex64], n: usize) -> Vec<Complex64> {
    let start = (0..n)
        .max_by(|&a, &b| cov[a * n + a].re.total_cmp(&cov[b * n + b].re))
        .unwrap_or(0);
    if cov[start * n + start].re <= 0.0 {
        return vec![ZERO; n];
    }
    let mut v: Vec<Complex64> = (0..n).map(|a| cov[a * n + start]).collect();
    let mut next = vec![ZERO; n];
    for _ in 0..WALSH_POWER_STEPS {
        let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        v.iter_mut().for_each(|z| *z /= norm);
        for (a, out) in next.iter_mut().enumerate() {
            *out = (0..n).map(|b| cov[a * n + b] * v[b]).sum();
        }
        std::mem::swap(&mut v, &mut next);
    }
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return vec![ZERO; n];
    }
    let r = v[0].norm();
    let phase = if r > 0.0 {
        v[0].conj() / r
    } else {
        Complex64::new(1.0, 0.0)
    };
    v.into_iter().map(|z| z * phase / norm).collect()
}

/// Per-coil dcf-weighted adjoint of every coil, in coil order.
pub fn coil_images(
    frame: &KSpaceFrame,
    plan: &NufftPlan,
    arm_weights: Option<&[f64]>,
) -> Result<Array3<Complex64>> {
    let grid = plan.grid();
    let imgs: Vec<ComplexImage> = (0..frame.coils())
        .into_par_iter()
        .map(|c| plan.adjoint_weighted(frame.coil(c), true, arm_weights))
        .collect::<Result<_>>()?;
    let mut out = Array3::zeros((frame.coils(), grid.height, grid.width));
    for (c, img) in imgs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), c).assign(&img);
    }
    Ok(out)
}

/// Averages k-space over all frames, grids each coil and applies the Walsh estimate.
pub fn estimate_from_utterance(
    frames: &[KSpaceFrame],
    plan: &NufftPlan,
) -> Result<SensitivityMaps> {
    let first = frames
        .first()
        .ok_or_else(|| Error::EmptyInput("no frames for sensitivity estimation".into()))?;
    let mut mean = Array3::<Complex64>::zeros(first.data().dim());
    for f in frames {
        if f.data().dim() != mean.dim() {
            return Err(Error::ShapeMismatch(
                "frames differ in k-space shape".into(),
            ));
        }
        mean += f.data();
    }
    let n = frames.len() as f64;
    mean.mapv_inplace(|z| z / n);
    let avg = first.with_data(mean);
    walsh_estimate(&coil_images(&avg, plan, None)?, WALSH_BLOCK)
}

fn check_maps(frame: &KSpaceFrame, plan: &NufftPlan, maps: &SensitivityMaps) -> Result<()> {
    if frame.coils() != maps.coils() {
        return Err(Error::ShapeMismatch(format!(
            "{} coils vs {} maps",
            frame.coils(),
            maps.coils()
        )));
    }
    if maps.grid() != plan.grid() {
        return Err(Error::ShapeMismatch(
            "sensitivity grid vs trajectory grid".into(),
        ));
    }
    Ok(())
}

/// `sum_c conj(S_c) * adjoint_dcf(w . k_c)` before taking the magnitude.
pub fn sense_combine_complex(
    frame: &KSpaceFrame,
    plan: &NufftPlan,
    maps: &SensitivityMaps,
    arm_weights: Option<&[f64]>,
) -> Result<ComplexImage> {
    check_maps(frame, plan, maps)?;
    let imgs = coil_images(frame, plan, arm_weights)?;
    Ok(combine_coils(&imgs, maps))
}

pub(crate) fn combine_coils(imgs: &Array3<Complex64>, maps: &SensitivityMaps) -> ComplexImage {
    let (coils, h, w) = imgs.dim();
    let mut out = Array2::zeros((h, w));
    for c in 0..coils {
        ndarray::Zip::from(&mut out)
            .and(imgs.index_axis(Axis(0), c))
            .and(maps.coil(c))
            .for_each(|o, &x, &s| *o += s.conj() * x);
    }
    out
}

/// Magnitude divided by its maximum; an all-zero image stays zero.
pub fn magnitude_normalize(z: &ComplexImage) -> Array2<f64> {
    let mag = z.mapv(|v| v.norm());
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        mag.mapv(|m| m / max)
    } else {
        mag
    }
}

/// SENSE-weighted gridding reconstruction normalized to `[0, 1]`.
pub fn sense_combine(
    frame: &KSpaceFrame,
    plan: &NufftPlan,
    maps: &SensitivityMaps,
) -> Result<ReconFrame> {
    let z = sense_combine_complex(frame, plan, maps, None)?;
    Ok(ReconFrame::new(magnitude_normalize(&z), Method::Gridding))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nufft::GridderConfig;
    use crate::trajectory::gen_spiral;

    fn frame_from(data: Array3<Complex64>) -> KSpaceFrame {
        normalize_kspace(data).unwrap()
    }

    #[test]
    fn normalization_examples() {
        let mut raw = Array3::from_elem((2, 13, 4), Complex64::new(1.0, 0.0));
        raw[[1, 3, 2]] = Complex64::new(-4.0, 0.0);
        let f = normalize_kspace(raw.clone()).unwrap();
        assert_eq!(f.norm_scale(), 4.0);
        assert_eq!(f.data()[[0, 0, 0]], Complex64::new(0.25, 0.0));

        let unit = Array3::from_elem((1, 13, 2), Complex64::new(0.0, 1.0));
        let f = normalize_kspace(unit.clone()).unwrap();
        assert_eq!(f.norm_scale(), 1.0);
        assert_eq!(f.data(), &unit);

        let mut raw = Array3::from_elem((1, 13, 2), Complex64::new(0.5, 0.0));
        raw[[0, 0, 0]] = Complex64::new(3.0, 4.0);
        assert_eq!(normalize_kspace(raw).unwrap().norm_scale(), 5.0);

        assert!(matches!(
            normalize_kspace(Array3::zeros((1, 13, 2))),
            Err(Error::AllZeroInput)
        ));
    }

    #[test]
    fn simulated_maps_are_sos_normalized_and_deterministic() {
        let g = GridSize::square(24);
        let one = simulate_sensitivities(1, g, 3).unwrap();
        assert!(one.maps().iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        let eight = simulate_sensitivities(8, g, 3).unwrap();
        for i in 0..24 {
            for j in 0..24 {
                let sos: f64 = eight
                    .maps()
                    .slice(s![.., i, j])
                    .iter()
                    .map(|z| z.norm_sqr())
                    .sum();
                assert!((sos - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(eight, simulate_sensitivities(8, g, 3).unwrap());
        assert!(simulate_sensitivities(0, g, 3).is_err());
    }

    #[test]
    fn walsh_recovers_spatially_constant_maps_exactly() {
        let profile = [
            Complex64::new(0.6, 0.0),
            Complex64::new(0.0, 0.48),
            Complex64::new(-0.64, 0.0),
        ];
        let truth =
            SensitivityMaps::normalized(Array3::from_shape_fn((3, 12, 12), |(c, _, _)| profile[c]));
        let obj = Array2::from_shape_fn((12, 12), |(i, j)| {
            Complex64::from_polar(1.0 + i as f64, 0.1 * j as f64)
        });
        let imgs = Array3::from_shape_fn((3, 12, 12), |(c, i, j)| {
            truth.maps()[[c, i, j]] * obj[[i, j]]
        });
        let est = walsh_estimate(&imgs, WALSH_BLOCK).unwrap();
        assert!(est
            .maps()
            .iter()
            .zip(truth.maps())
            .all(|(a, b)| (a - b).norm() < 1e-10));
    }

    #[test]
    fn walsh_tracks_smooth_maps() {
        let g = GridSize::square(32);
        let truth = simulate_sensitivities(6, g, 9).unwrap();
        let imgs = truth.maps().mapv(|s| s * Complex64::new(0.8, 0.3));
        let est = walsh_estimate(&imgs, WALSH_BLOCK).unwrap();
        let max = est
            .maps()
            .iter()
            .zip(truth.maps())
            .map(|(a, b)| (a.norm() - b.norm()).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-2, "max walsh magnitude error {max}");
        // Phase reference: coil 0 is real and non-negative.
        assert!(est
            .coil(0)
            .iter()
            .all(|z| z.im.abs() < 1e-12 && z.re >= 0.0));
    }

    #[test]
    fn walsh_single_coil_and_zero_images() {
        let mut img = Array3::zeros((1, 10, 10));
        img[[0, 5, 5]] = Complex64::new(0.0, -2.0);
        let est = walsh_estimate(&img, 4).unwrap();
        // Nonzero wherever the window sees the object.
        assert!((est.maps()[[0, 5, 5]].norm() - 1.0).abs() < 1e-12);
        assert!(est.maps()[[0, 0, 0]].norm() == 0.0);
        let zero = walsh_estimate(&Array3::zeros((4, 8, 8)), 8).unwrap();
        assert!(zero.maps().iter().all(|z| *z == ZERO));
    }

    #[test]
    fn walsh_ignores_global_complex_scale() {
        let g = GridSize::square(16);
        let truth = simulate_sensitivities(4, g, 1).unwrap();
        let obj =
            Array2::from_shape_fn((16, 16), |(i, j)| 0.2 + ((i * j) as f64 * 0.1).sin().abs());
        let mut imgs = truth.maps().clone();
        for c in 0..4 {
            let mut v = imgs.index_axis_mut(Axis(0), c);
            v.zip_mut_with(&obj, |z, o| *z *= o);
        }
        let a = walsh_estimate(&imgs, 8).unwrap();
        let b = walsh_estimate(&imgs.mapv(|z| z * Complex64::from_polar(3.7, 1.1)), 8).unwrap();
        assert!(a
            .maps()
            .iter()
            .zip(b.maps())
            .all(|(x, y)| (x - y).norm() < 1e-6));
    }

    #[test]
    fn maps_validation() {
        let mut m = Array3::zeros((2, 2, 2));
        m[[0, 0, 0]] = Complex64::new(1.0, 0.0);
        assert!(SensitivityMaps::from_normalized(m.clone()).is_ok());
        m[[1, 0, 0]] = Complex64::new(1.0, 0.0);
        assert!(SensitivityMaps::from_normalized(m).is_err());
    }

    fn small_setup() -> (NufftPlan, SensitivityMaps) {
        let g = GridSize::square(24);
        let t = gen_spiral(13, 96, 3.0, g).unwrap();
        (
            NufftPlan::new(&t, &GridderConfig::default()).unwrap(),
            simulate_sensitivities(4, g, 2).unwrap(),
        )
    }

    fn disc_kspace(plan: &NufftPlan, maps: &SensitivityMaps) -> Array3<Complex64> {
        let g = plan.grid();
        let obj = Array2::from_shape_fn(g.dim(), |(i, j)| {
            let r = ((i as f64 - 12.0).powi(2) + (j as f64 - 10.0).powi(2)).sqrt();
            Complex64::new(if r < 7.0 { 1.0 } else { 0.1 }, 0.0)
        });
        let mut k = Array3::zeros((maps.coils(), 13, 96));
        for c in 0..maps.coils() {
            let img = &obj * &maps.coil(c);
            k.index_axis_mut(Axis(0), c)
                .assign(&plan.forward(img.view()).unwrap());
        }
        k
    }

    #[test]
    fn sense_combine_range_and_zero_input() {
        let (plan, maps) = small_setup();
        let f = frame_from(disc_kspace(&plan, &maps));
        let r = sense_combine(&f, &plan, &maps).unwrap();
        assert!(r.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(r.image.iter().copied().fold(0.0, f64::max), 1.0);
        let zero = KSpaceFrame::from_normalized(Array3::zeros((4, 13, 96)), 1.0).unwrap();
        assert!(sense_combine(&zero, &plan, &maps)
            .unwrap()
            .image
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn sense_combine_is_scale_invariant() {
        let (plan, maps) = small_setup();
        let k = disc_kspace(&plan, &maps);
        let f = KSpaceFrame::from_normalized(k.mapv(|z| z * 0.5 / 40.0), 1.0).unwrap();
        let g = KSpaceFrame::from_normalized(k.mapv(|z| z * 0.25 / 40.0), 1.0).unwrap();
        let a = sense_combine(&f, &plan, &maps).unwrap();
        let b = sense_combine(&g, &plan, &maps).unwrap();
        assert_eq!(a.image, b.image);
        let c = sense_combine(
            &KSpaceFrame::from_normalized(k.mapv(|z| z * 0.3 / 40.0), 1.0).unwrap(),
            &plan,
            &maps,
        )
        .unwrap();
        assert!(a
            .image
            .iter()
            .zip(&c.image)
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn retained_arms_are_zeroed() {
        let (plan, maps) = small_setup();
        let f = frame_from(disc_kspace(&plan, &maps));
        let sub = f.retain_arms(&[0, 7]).unwrap();
        assert_eq!(sub.acquired().iter().filter(|a| **a).count(), 2);
        assert!(sub.data().slice(s![.., 1, ..]).iter().all(|z| *z == ZERO));
        assert_eq!(
            sub.data().slice(s![.., 7, ..]),
            f.data().slice(s![.., 7, ..])
        );
        assert!(f.retain_arms(&[13]).is_err());
    }

    #[test]
    fn utterance_estimate_is_idempotent_under_repetition() {
        let (plan, maps) = small_setup();
        let f = frame_from(disc_kspace(&plan, &maps));
        let one = estimate_from_utterance(std::slice::from_ref(&f), &plan).unwrap();
        let many = estimate_from_utterance(&vec![f.clone(); 5], &plan).unwrap();
        assert!(one
            .maps()
            .iter()
            .zip(many.maps())
            .all(|(a, b)| (a - b).norm() < 1e-12));
        let zero = KSpaceFrame::from_normalized(Array3::zeros((4, 13, 96)), 1.0).unwrap();
        assert!(estimate_from_utterance(&[zero], &plan)
            .unwrap()
            .maps()
            .iter()
            .all(|z| *z == ZERO));
        assert!(estimate_from_utterance(&[], &plan).is_err());
    }
}
