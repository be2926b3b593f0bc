//! Synthetic dynamic vocal-tract phantom with coupled speech-like features.
//!
//! Coordinates are normalized to `[-1, 1]` with `x` pointing towards the lips
//! (image columns) and `y` pointing down (image rows).

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Array4, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{pool, FeatureSequence, FeatureSource, PooledFeature};
use crate::coil::{
    estimate_from_utterance, normalize_kspace, simulate_sensitivities, KSpaceFrame, SensitivityMaps,
};
use crate::error::{Error, Result};
use crate::fusion::gaussian_blur;
use crate::fusion::{eba_from_segmentation, EbAMap};
use crate::nufft::NufftPlan;
use crate::train::Utterance;
use crate::trajectory::{GridSize, FRAME_RATE_FPS};

/// Articulator classes, in mask order.
pub const CLASS_NAMES: [&str; 3] = ["tongue", "lips", "velum"];
/// Articulator parameters: tongue x, tongue y, tongue elongation, lip aperture, velum angle.
pub const PARAM_COUNT: usize = 5;

const TISSUE: f64 = 0.35;
const AIR: f64 = 0.03;
const TONGUE: f64 = 0.95;
const LIPS: f64 = 0.8;
const VELUM: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub tongue_x: f64,
    pub tongue_y: f64,
    pub tongue_elongation: f64,
    pub lip_aperture: f64,
    pub velum_angle: f64,
    /// Oscillation frequencies are drawn per articulator from this range, in Hz.
    pub freq_range_hz: (f64, f64),
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            tongue_x: 0.12,
            tongue_y: 0.08,
            tongue_elongation: 0.25,
            lip_aperture: 0.08,
            velum_angle: 0.35,
            freq_range_hz: (0.5, 2.5),
        }
    }
}

impl MotionConfig {
    pub fn still() -> Self {
        Self {
            tongue_x: 0.0,
            tongue_y: 0.0,
            tongue_elongation: 0.0,
            lip_aperture: 0.0,
            velum_angle: 0.0,
            ..Self::default()
        }
    }

    fn amplitudes(&self) -> [f64; PARAM_COUNT] {
        [
            self.tongue_x,
            self.tongue_y,
            self.tongue_elongation,
            self.lip_aperture,
            self.velum_angle,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub grid: GridSize,
    pub frames: usize,
    pub coils: usize,
    pub motion: MotionConfig,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Seed of the articulator-to-feature map; shared by all utterances of a dataset.
    pub coupling_seed: u64,
    pub feature_dim: usize,
    pub feature_steps: usize,
    pub feature_noise: f64,
    /// Blur applied to each frame, in pixels.
    pub blur_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid: GridSize::square(84),
            frames: 40,
            coils: 8,
            motion: MotionConfig::default(),
            noise_sigma: 0.01,
            seed: 0,
            coupling_seed: 1,
            feature_dim: 768,
            feature_steps: 12,
            feature_noise: 0.05,
            blur_sigma: 0.7,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.coils == 0 || self.feature_dim == 0 || self.feature_steps == 0 {
            return Err(Error::InvalidArgument(
                "frames, coils, feature_dim and feature_steps must be positive".into(),
            ));
        }
        if self.grid.height < 8 || self.grid.width < 8 {
            return Err(Error::InvalidArgument(
                "phantom grid must be at least 8x8".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.feature_noise >= 0.0 && self.blur_sigma >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise levels and blur must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSequence {
    /// `[T, H, W]` in `[0, 1]`.
    pub frames: Array3<f64>,
    /// `[T, K, H, W]` binary articulator supports.
    pub masks: Array4<u8>,
    /// `[T, P]`.
    pub params: Array2<f64>,
    /// `[T, L, d]`.
    pub features: Array3<f32>,
    /// Frame centre times in seconds.
    pub timestamps: Vec<f64>,
}

struct Canvas {
    h: usize,
    w: usize,
}

impl Canvas {
    fn coords(&self, i: usize, j: usize) -> (f64, f64) {
        (
            2.0 * (j as f64 + 0.5) / self.w as f64 - 1.0,
            2.0 * (i as f64 + 0.5) / self.h as f64 - 1.0,
        )
    }

    /// Pixels inside a rotated ellipse.
    fn ellipse(&self, cx: f64, cy: f64, ax: f64, ay: f64, angle: f64) -> Array2<bool> {
        let (s, c) = angle.sin_cos();
        Array2::from_shape_fn((self.h, self.w), |(i, j)| {
            let (x, y) = self.coords(i, j);
            let (dx, dy) = (x - cx, y - cy);
            let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
            (u / ax).powi(2) + (v / ay).powi(2) <= 1.0
        })
    }

    fn rect(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> Array2<bool> {
        Array2::from_shape_fn((self.h, self.w), |(i, j)| {
            let (x, y) = self.coords(i, j);
            x >= x0 && x <= x1 && y >= y0 && y <= y1
        })
    }
}

fn paint(img: &mut Array2<f64>, region: &Array2<bool>, value: f64) {
    img.zip_mut_with(region, |p, &inside| {
        if inside {
            *p = value;
        }
    });
}

/// Renders one frame and its articulator masks from a parameter vector.
pub fn render(
    grid: GridSize,
    params: &[f64; PARAM_COUNT],
    blur_sigma: f64,
) -> (Array2<f64>, Array3<u8>) {
    let cv = Canvas {
        h: grid.height,
        w: grid.width,
    };
    let [tx, ty, elong, aperture, velum] = *params;
    let mut img = Array2::zeros((grid.height, grid.width));
    paint(&mut img, &cv.ellipse(0.0, 0.05, 0.82, 0.78, 0.0), TISSUE);
    paint(&mut img, &cv.ellipse(0.18, -0.02, 0.45, 0.14, 0.0), AIR);
    paint(&mut img, &cv.rect(-0.36, -0.2, -0.02, 0.8), AIR);

    let e = elong.max(0.3);
    let tongue = cv.ellipse(tx, ty, 0.24 * e.sqrt(), 0.14 / e.sqrt(), 0.0);
    let half_gap = 0.5 * aperture.max(0.0) + 0.07;
    let upper = cv.ellipse(0.66, -half_gap, 0.1, 0.065, 0.0);
    let lower = cv.ellipse(0.66, half_gap, 0.1, 0.065, 0.0);
    let lips = Array2::from_shape_fn(upper.dim(), |ij| upper[ij] || lower[ij]);
    let velum_region = cv.ellipse(
        -0.22 + 0.1 * velum.cos(),
        -0.1 + 0.1 * velum.sin(),
        0.12,
        0.04,
        velum,
    );
    paint(&mut img, &tongue, TONGUE);
    paint(&mut img, &lips, LIPS);
    paint(&mut img, &velum_region, VELUM);

    let mut masks = Array3::zeros((CLASS_NAMES.len(), grid.height, grid.width));
    for (k, region) in [&tongue, &lips, &velum_region].into_iter().enumerate() {
        masks
            .index_axis_mut(Axis(0), k)
            .zip_mut_with(region, |m, &inside| *m = inside as u8);
    }
    let img = if blur_sigma > 0.0 {
        gaussian_blur(&img, blur_sigma)
    } else {
        img
    };
    let max = img.iter().copied().fold(0.0, f64::max);
    (img.mapv(|v| (v / max).clamp(0.0, 1.0)), masks)
}

/// Rest configuration of the articulators.
const REST: [f64; PARAM_COUNT] = [0.08, 0.12, 1.0, 0.1, 0.4];

/// Fixed random map from articulator parameters to features, `[d, P]`.
pub fn coupling_matrix(d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (PARAM_COUNT as f64).sqrt();
    Array2::from_shape_fn((d, PARAM_COUNT), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

/// Builds a phantom utterance; deterministic in `cfg`.
pub fn generate(cfg: &PhantomConfig) -> Result<PhantomSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let amps = cfg.motion.amplitudes();
    let (f_lo, f_hi) = cfg.motion.freq_range_hz;
    let osc: Vec<(f64, f64)> = (0..PARAM_COUNT)
        .map(|_| {
            (
                rng.random_range(f_lo..=f_hi),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let t_count = cfg.frames;
    let timestamps: Vec<f64> = (0..t_count)
        .map(|t| (t as f64 + 0.5) / FRAME_RATE_FPS)
        .collect();
    let params = Array2::from_shape_fn((t_count, PARAM_COUNT), |(t, p)| {
        let (f, phase) = osc[p];
        REST[p] + amps[p] * (2.0 * PI * f * timestamps[t] + phase).sin()
    });

    let rendered: Vec<(Array2<f64>, Array3<u8>)> = (0..t_count)
        .into_par_iter()
        .map(|t| {
            let p: [f64; PARAM_COUNT] = std::array::from_fn(|k| params[[t, k]]);
            render(cfg.grid, &p, cfg.blur_sigma)
        })
        .collect();
    let (h, w) = cfg.grid.dim();
    let mut frames = Array3::zeros((t_count, h, w));
    let mut masks = Array4::zeros((t_count, CLASS_NAMES.len(), h, w));
    for (t, (img, m)) in rendered.into_iter().enumerate() {
        frames.index_axis_mut(Axis(0), t).assign(&img);
        masks.index_axis_mut(Axis(0), t).assign(&m);
    }

    let coupling = coupling_matrix(cfg.feature_dim, cfg.coupling_seed);
    let scale: [f64; PARAM_COUNT] =
        std::array::from_fn(|p| if amps[p] > 0.0 { amps[p] } else { 1.0 });
    let mut features = Array3::zeros((t_count, cfg.feature_steps, cfg.feature_dim));
    for t in 0..t_count {
        let z: Vec<f64> = (0..PARAM_COUNT)
            .map(|p| (params[[t, p]] - REST[p]) / scale[p])
            .collect();
        let clean: Vec<f64> = (0..cfg.feature_dim)
            .map(|i| (0..PARAM_COUNT).map(|p| coupling[[i, p]] * z[p]).sum())
            .collect();
        for l in 0..cfg.feature_steps {
            for i in 0..cfg.feature_dim {
                let n: f64 = StandardNormal.sample(&mut rng);
                features[[t, l, i]] = (clean[i] + cfg.feature_noise * n) as f32;
            }
        }
    }
    Ok(PhantomSequence {
        frames,
        masks,
        params,
        features,
        timestamps,
    })
}

/// Multi-coil k-space of every frame before normalization, with circular
/// complex Gaussian noise of standard deviation `noise_sigma`.
pub fn simulate_raw(
    frames: &Array3<f64>,
    plan: &NufftPlan,
    maps: &SensitivityMaps,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Array3<Complex64>>> {
    let (_, h, w) = frames.dim();
    if (h, w) != plan.grid().dim() || maps.grid() != plan.grid() {
        return Err(Error::ShapeMismatch(
            "frames, trajectory and maps must share a grid".into(),
        ));
    }
    let (r, n) = (
        plan.trajectory().arms(),
        plan.trajectory().samples_per_arm(),
    );
    let coils = maps.coils();
    (0..frames.len_of(Axis(0)))
        .into_par_iter()
        .map(|t| {
            let frame = frames.index_axis(Axis(0), t);
            let mut k = Array3::zeros((coils, r, n));
            for c in 0..coils {
                let img = ndarray::Zip::from(&frame)
                    .and(maps.coil(c))
                    .map_collect(|&x, &s| s * x);
                k.index_axis_mut(Axis(0), c)
                    .assign(&plan.forward(img.view())?);
            }
            if noise_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                let s = noise_sigma / std::f64::consts::SQRT_2;
                for z in k.iter_mut() {
                    let (a, b): (f64, f64) = (
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                    );
                    *z += Complex64::new(a * s, b * s);
                }
            }
            Ok(k)
        })
        .collect()
}

/// Simulated acquisition normalized per frame.
pub fn simulate_acquisition(
    seq: &PhantomSequence,
    plan: &NufftPlan,
    maps: &SensitivityMaps,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<KSpaceFrame>> {
    simulate_raw(&seq.frames, plan, maps, noise_sigma, seed)?
        .into_iter()
        .map(normalize_kspace)
        .collect()
}

/// Temporal means of the per-frame feature windows.
pub fn pooled_features(features: &Array3<f32>) -> Result<Vec<PooledFeature>> {
    features
        .axis_iter(Axis(0))
        .map(|f| FeatureSequence::new(f.to_owned(), FeatureSource::FileBacked).map(|s| pool(&s)))
        .collect()
}

/// Utterance-level EbA map from the union of all frames' articulator masks.
pub fn utterance_eba(masks: &Array4<u8>, sigma: f64) -> Result<EbAMap> {
    let (t, k, h, w) = masks.dim();
    let flat = masks
        .view()
        .into_shape_with_order((t * k, h, w))
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let views: Vec<_> = flat.outer_iter().collect();
    eba_from_segmentation(&views, sigma)
}

/// Acquires `seq` with simulated coils and packages it for training and
/// evaluation, with sensitivities estimated from the data itself.
pub fn build_utterance(
    id: &str,
    seq: &PhantomSequence,
    cfg: &PhantomConfig,
    plan: &NufftPlan,
    eba_sigma: f64,
) -> Result<Utterance> {
    let coil_seed = cfg.seed.wrapping_add(0x5151);
    let truth = simulate_sensitivities(cfg.coils, cfg.grid, coil_seed)?;
    let kspace = simulate_acquisition(
        seq,
        plan,
        &truth,
        cfg.noise_sigma,
        cfg.seed.wrapping_add(0xacc),
    )?;
    let maps = estimate_from_utterance(&kspace, plan)?;
    Ok(Utterance {
        id: id.to_string(),
        kspace,
        features: pooled_features(&seq.features)?,
        references: seq.frames.clone(),
        maps,
        eba: utterance_eba(&seq.masks, eba_sigma)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nufft::GridderConfig;
    use crate::trajectory::gen_spiral;

    fn small() -> PhantomConfig {
        PhantomConfig {
            grid: GridSize::square(32),
            frames: 6,
            coils: 2,
            feature_dim: 16,
            feature_steps: 3,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn frames_in_range_and_masks_inside_support() {
        let s = generate(&small()).unwrap();
        assert!(s.frames.iter().all(|v| (0.0..=1.0).contains(v)));
        for t in 0..6 {
            let frame = s.frames.index_axis(Axis(0), t);
            assert_eq!(frame.iter().copied().fold(0.0, f64::max), 1.0);
            for k in 0..3 {
                let m = s.masks.slice(ndarray::s![t, k, .., ..]);
                assert!(m.iter().any(|v| *v == 1));
                assert!(m.iter().zip(frame.iter()).all(|(m, f)| *m == 0 || *f > 0.0));
            }
        }
        assert!((s.timestamps[1] - 1.5 / FRAME_RATE_FPS).abs() < 1e-15);
    }

    #[test]
    fn still_motion_gives_identical_frames() {
        let cfg = PhantomConfig {
            motion: MotionConfig::still(),
            ..small()
        };
        let s = generate(&cfg).unwrap();
        for t in 1..6 {
            assert_eq!(
                s.frames.index_axis(Axis(0), t),
                s.frames.index_axis(Axis(0), 0)
            );
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = generate(&PhantomConfig { seed: 5, ..small() }).unwrap();
        assert_ne!(other.params, generate(&small()).unwrap().params);
    }

    #[test]
    fn clean_features_linearly_decode_articulators() {
        let cfg = PhantomConfig {
            frames: 60,
            feature_noise: 0.0,
            feature_dim: 12,
            ..small()
        };
        let s = generate(&cfg).unwrap();
        // Least-squares decoder with intercept, solved through the normal equations.
        let t_count = s.params.nrows();
        let d = cfg.feature_dim + 1;
        let design = Array2::from_shape_fn((t_count, d), |(t, i)| {
            if i == 0 {
                1.0
            } else {
                (0..cfg.feature_steps)
                    .map(|l| s.features[[t, l, i - 1]] as f64)
                    .sum::<f64>()
                    / cfg.feature_steps as f64
            }
        });
        for p in 0..PARAM_COUNT {
            let target = s.params.column(p).to_owned();
            let gram = design.t().dot(&design);
            let rhs = design.t().dot(&target);
            let coef = solve_spd(&gram, &rhs);
            let pred = design.dot(&coef);
            let mean = target.mean().unwrap();
            let ss_res: f64 = pred.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum();
            let ss_tot: f64 = target.iter().map(|v| (v - mean).powi(2)).sum();
            assert!(
                1.0 - ss_res / ss_tot > 0.99,
                "param {p}: R2 {}",
                1.0 - ss_res / ss_tot
            );
        }
    }

    /// Gaussian elimination with partial pivoting and a tiny ridge.
    fn solve_spd(a: &Array2<f64>, b: &ndarray::Array1<f64>) -> ndarray::Array1<f64> {
        let n = b.len();
        let mut m = a.clone();
        for i in 0..n {
            m[[i, i]] += 1e-12;
        }
        let mut x = b.clone();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
                .unwrap();
            for k in 0..n {
                m.swap([col, k], [piv, k]);
            }
            x.swap(col, piv);
            for row in col + 1..n {
                let f = m[[row, col]] / m[[col, col]];
                for k in col..n {
                    m[[row, k]] -= f * m[[col, k]];
                }
                x[row] -= f * x[col];
            }
        }
        for col in (0..n).rev() {
            let s: f64 = (col + 1..n).map(|k| m[[col, k]] * x[k]).sum();
            x[col] = (x[col] - s) / m[[col, col]];
        }
        x
    }

    fn acquisition_setup() -> (NufftPlan, SensitivityMaps) {
        let g = GridSize::square(32);
        let t = gen_spiral(13, 128, 3.0, g).unwrap();
        (
            NufftPlan::new(&t, &GridderConfig::default()).unwrap(),
            simulate_sensitivities(2, g, 1).unwrap(),
        )
    }

    #[test]
    fn pure_noise_statistics() {
        let (plan, maps) = acquisition_setup();
        let zero = Array3::zeros((1, 32, 32));
        let k = simulate_raw(&zero, &plan, &maps, 0.02, 4).unwrap();
        let n = k[0].len() as f64;
        let std = (k[0].iter().map(|z| z.norm_sqr()).sum::<f64>() / n).sqrt();
        assert!((std - 0.02).abs() < 0.05 * 0.02, "empirical std {std}");
    }

    #[test]
    fn acquisition_is_linear_and_scale_free() {
        let (plan, maps) = acquisition_setup();
        let s = generate(&small()).unwrap();
        let frames = s.frames.slice(ndarray::s![..2, .., ..]).to_owned();
        let zero = Array3::zeros(frames.dim());
        let noise = simulate_raw(&zero, &plan, &maps, 0.01, 3).unwrap();
        let a = simulate_raw(&frames, &plan, &maps, 0.01, 3).unwrap();
        let b = simulate_raw(&frames.mapv(|v| 2.5 * v), &plan, &maps, 0.01, 3).unwrap();
        for t in 0..2 {
            let lhs = &b[t] - &noise[t];
            let rhs = (&a[t] - &noise[t]).mapv(|z| z * 2.5);
            assert!(lhs.iter().zip(&rhs).all(|(x, y)| (x - y).norm() < 1e-12));
        }
        let doubled = PhantomSequence {
            frames: frames.mapv(|v| 2.0 * v),
            ..s.clone()
        };
        let single = PhantomSequence { frames, ..s };
        let fa = simulate_acquisition(&single, &plan, &maps, 0.0, 0).unwrap();
        let fb = simulate_acquisition(&doubled, &plan, &maps, 0.0, 0).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.data(), y.data());
            assert_eq!(2.0 * x.norm_scale(), y.norm_scale());
        }
    }
}
