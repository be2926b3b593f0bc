//! Non-uniform FFT between Cartesian images and spiral k-space samples.
//!
//! Gridding uses a Kaiser-Bessel kernel on an oversampled Cartesian grid.
//! Conventions shared by every module:
//!
//! * pixel `(u, v)` sits at centred coordinates `(u - H/2, v - W/2)`;
//! * k-space coordinate component 0 pairs with rows, component 1 with columns;
//! * `forward` evaluates `s(k) = (H W)^{-1/2} sum x[u, v] exp(-2 pi i (k0 u' + k1 v'))`
//!   and `adjoint` (without density compensation) is its exact conjugate transpose.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::trajectory::{GridSize, Trajectory};

/// Cartesian complex image `[H, W]`.
pub type ComplexImage = Array2<Complex64>;
/// One coil's samples along all arms, `[arms, samples_per_arm]`.
pub type SampleVector = Array2<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridderConfig {
    pub oversampling: f64,
    /// Kernel support in oversampled-grid samples.
    pub kernel_width: usize,
    /// Kaiser-Bessel shape; `None` picks the oversampling-dependent default.
    pub kernel_beta: Option<f64>,
}

impl Default for GridderConfig {
    fn default() -> Self {
        Self {
            oversampling: 1.5,
            kernel_width: 6,
            kernel_beta: None,
        }
    }
}

impl GridderConfig {
    /// `pi sqrt((W/os)^2 (os - 1/2)^2 - 0.8)`.
    pub fn beta(&self) -> f64 {
        self.kernel_beta.unwrap_or_else(|| {
            let w = self.kernel_width as f64;
            let os = self.oversampling;
            PI * ((w / os).powi(2) * (os - 0.5).powi(2) - 0.8)
                .max(0.0)
                .sqrt()
        })
    }

    pub fn oversampled(&self, grid: GridSize) -> GridSize {
        GridSize::new(
            (self.oversampling * grid.height as f64).round() as usize,
            (self.oversampling * grid.width as f64).round() as usize,
        )
    }

    fn validate(&self, grid: GridSize) -> Result<()> {
        if !(self.oversampling >= 1.0 && self.oversampling.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "oversampling must be >= 1, got {}",
                self.oversampling
            )));
        }
        if self.kernel_width == 0 {
            return Err(Error::InvalidArgument(
                "kernel_width must be positive".into(),
            ));
        }
        let os = self.oversampled(grid);
        if os.height < grid.height
            || os.width < grid.width
            || os.height < self.kernel_width
            || os.width < self.kernel_width
        {
            return Err(Error::InvalidArgument(
                "oversampled grid smaller than image or kernel".into(),
            ));
        }
        if self.beta() <= 0.0 {
            return Err(Error::InvalidArgument(
                "kernel beta must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > 1e-17 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

#[derive(Debug, Clone, Copy)]
struct Kernel {
    half_width: f64,
    beta: f64,
    norm: f64,
}

impl Kernel {
    fn new(width: usize, beta: f64) -> Self {
        Self {
            half_width: width as f64 / 2.0,
            beta,
            norm: bessel_i0(beta),
        }
    }

    fn eval(&self, t: f64) -> f64 {
        let r = t / self.half_width;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        bessel_i0(self.beta * (1.0 - r * r).sqrt()) / self.norm
    }

    /// Continuous Fourier transform of `eval` at frequency `nu` (cycles per grid sample).
    fn spectrum(&self, nu: f64) -> f64 {
        let w = 2.0 * self.half_width;
        let a = self.beta * self.beta - (PI * w * nu).powi(2);
        let val = if a > 1e-12 {
            let s = a.sqrt();
            s.sinh() / s
        } else if a < -1e-12 {
            let s = (-a).sqrt();
            s.sin() / s
        } else {
            1.0
        };
        w * val / self.norm
    }
}

/// Precomputed interpolation weights, deapodization and FFT plans for one trajectory.
///
/// Immutable after construction; share it across threads freely.
#[derive(Debug, Clone)]
pub struct NufftPlan {
    traj: Trajectory,
    cfg: GridderConfig,
    over: GridSize,
    width: usize,
    /// First grid tap per sample and axis, already wrapped into `[0, G)`.
    start: Vec<[usize; 2]>,
    /// `width` row weights followed by `width` column weights per sample.
    weights: Vec<f64>,
    deapod_rows: Vec<f64>,
    deapod_cols: Vec<f64>,
    fft: Fft2,
}

impl NufftPlan {
    pub fn new(traj: &Trajectory, cfg: &GridderConfig) -> Result<Self> {
        let grid = traj.grid();
        cfg.validate(grid)?;
        let over = cfg.oversampled(grid);
        let width = cfg.kernel_width;
        let kernel = Kernel::new(width, cfg.beta());
        let n = traj.len();
        let mut start = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n * 2 * width);
        let coords = traj.coords();
        for i in 0..traj.arms() {
            for s in 0..traj.samples_per_arm() {
                let mut first = [0usize; 2];
                for (axis, g) in [over.height, over.width].into_iter().enumerate() {
                    let pos = coords[[i, s, axis]] * g as f64;
                    let m0 = (pos - kernel.half_width).ceil() as i64;
                    first[axis] = m0.rem_euclid(g as i64) as usize;
                    for tap in 0..width {
                        weights.push(kernel.eval(pos - (m0 + tap as i64) as f64));
                    }
                }
                start.push(first);
            }
        }
        let deapod = |len: usize, g: usize| -> Vec<f64> {
            let half = (len / 2) as f64;
            (0..len)
                .map(|u| 1.0 / kernel.spectrum((u as f64 - half) / g as f64))
                .collect()
        };
        Ok(Self {
            traj: traj.clone(),
            cfg: *cfg,
            over,
            width,
            start,
            weights,
            deapod_rows: deapod(grid.height, over.height),
            deapod_cols: deapod(grid.width, over.width),
            fft: Fft2::new(over.height, over.width),
        })
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }

    pub fn config(&self) -> &GridderConfig {
        &self.cfg
    }

    pub fn grid(&self) -> GridSize {
        self.traj.grid()
    }

    pub fn oversampled_grid(&self) -> GridSize {
        self.over
    }

    fn scale(&self) -> f64 {
        1.0 / (self.grid().pixels() as f64).sqrt()
    }

    fn check_samples(&self, samples: &ArrayView2<'_, Complex64>) -> Result<()> {
        let want = (self.traj.arms(), self.traj.samples_per_arm());
        if samples.dim() != want {
            return Err(Error::ShapeMismatch(format!(
                "samples {:?} vs trajectory {:?}",
                samples.dim(),
                want
            )));
        }
        if samples
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(Error::NonFinite("k-space samples".into()));
        }
        Ok(())
    }

    /// Offset of pixel `u` (centred coordinate `u - len/2`) in the oversampled grid.
    fn grid_index(u: usize, len: usize, g: usize) -> usize {
        (u as i64 - (len / 2) as i64).rem_euclid(g as i64) as usize
    }

    fn spread_sample(&self, grid: &mut [Complex64], j: usize, value: Complex64) {
        let w = self.width;
        let (gh, gw) = (self.over.height, self.over.width);
        let [r0, c0] = self.start[j];
        let wts = &self.weights[j * 2 * w..(j + 1) * 2 * w];
        let (wr, wc) = wts.split_at(w);
        for (a, &wa) in wr.iter().enumerate() {
            let r = (r0 + a) % gh;
            let row = &mut grid[r * gw..(r + 1) * gw];
            let va = value * wa;
            for (b, &wb) in wc.iter().enumerate() {
                row[(c0 + b) % gw] += va * wb;
            }
        }
    }

    fn interp_sample(&self, grid: &[Complex64], j: usize) -> Complex64 {
        let w = self.width;
        let (gh, gw) = (self.over.height, self.over.width);
        let [r0, c0] = self.start[j];
        let wts = &self.weights[j * 2 * w..(j + 1) * 2 * w];
        let (wr, wc) = wts.split_at(w);
        let mut acc = ZERO;
        for (a, &wa) in wr.iter().enumerate() {
            let r = (r0 + a) % gh;
            let row = &grid[r * gw..(r + 1) * gw];
            let mut racc = ZERO;
            for (b, &wb) in wc.iter().enumerate() {
                racc += row[(c0 + b) % gw] * wb;
            }
            acc += racc * wa;
        }
        acc
    }

    fn grid_to_image(&self, mut grid: Vec<Complex64>) -> ComplexImage {
        self.fft.inverse(&mut grid);
        let GridSize { height, width } = self.grid();
        let scale = self.scale();
        let gw = self.over.width;
        Array2::from_shape_fn((height, width), |(u, v)| {
            let r = Self::grid_index(u, height, self.over.height);
            let c = Self::grid_index(v, width, gw);
            grid[r * gw + c] * (scale * self.deapod_rows[u] * self.deapod_cols[v])
        })
    }

    /// Adjoint NUFFT with optional density compensation.
    pub fn adjoint(
        &self,
        samples: ArrayView2<'_, Complex64>,
        apply_dcf: bool,
    ) -> Result<ComplexImage> {
        self.adjoint_weighted(samples, apply_dcf, None)
    }

    /// Adjoint NUFFT with an extra per-arm weight applied to every sample of that arm.
    pub fn adjoint_weighted(
        &self,
        samples: ArrayView2<'_, Complex64>,
        apply_dcf: bool,
        arm_weights: Option<&[f64]>,
    ) -> Result<ComplexImage> {
        self.check_samples(&samples)?;
        if let Some(w) = arm_weights {
            if w.len() != self.traj.arms() {
                return Err(Error::ArmCountMismatch {
                    expected: self.traj.arms(),
                    got: w.len(),
                });
            }
        }
        let per_arm = self.traj.samples_per_arm();
        let dcf = self.traj.dcf();
        let mut grid = vec![ZERO; self.over.pixels()];
        for ((arm, s), &y) in samples.indexed_iter() {
            let mut wgt = 1.0;
            if apply_dcf {
                wgt *= dcf[[arm, s]];
            }
            if let Some(aw) = arm_weights {
                wgt *= aw[arm];
            }
            if wgt != 0.0 {
                self.spread_sample(&mut grid, arm * per_arm + s, y * wgt);
            }
        }
        Ok(self.grid_to_image(grid))
    }

    /// Adjoint of a single arm's samples (all other arms treated as zero).
    pub fn adjoint_arm(
        &self,
        samples: ArrayView2<'_, Complex64>,
        arm: usize,
        apply_dcf: bool,
    ) -> Result<ComplexImage> {
        self.check_samples(&samples)?;
        if arm >= self.traj.arms() {
            return Err(Error::InvalidArgument(format!("arm {arm} out of range")));
        }
        let per_arm = self.traj.samples_per_arm();
        let dcf = self.traj.dcf();
        let mut grid = vec![ZERO; self.over.pixels()];
        for s in 0..per_arm {
            let w = if apply_dcf { dcf[[arm, s]] } else { 1.0 };
            self.spread_sample(&mut grid, arm * per_arm + s, samples[[arm, s]] * w);
        }
        Ok(self.grid_to_image(grid))
    }

    /// Forward NUFFT: image to samples on every trajectory point.
    pub fn forward(&self, image: ArrayView2<'_, Complex64>) -> Result<SampleVector> {
        let grid_size = self.grid();
        if image.dim() != grid_size.dim() {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} vs trajectory grid {:?}",
                image.dim(),
                grid_size.dim()
            )));
        }
        let gw = self.over.width;
        let mut grid = vec![ZERO; self.over.pixels()];
        for ((u, v), &x) in image.indexed_iter() {
            let r = Self::grid_index(u, grid_size.height, self.over.height);
            let c = Self::grid_index(v, grid_size.width, gw);
            grid[r * gw + c] = x * (self.deapod_rows[u] * self.deapod_cols[v]);
        }
        self.fft.forward(&mut grid);
        let scale = self.scale();
        let (arms, per_arm) = (self.traj.arms(), self.traj.samples_per_arm());
        Ok(Array2::from_shape_fn((arms, per_arm), |(i, s)| {
            self.interp_sample(&grid, i * per_arm + s) * scale
        }))
    }
}

/// One-shot adjoint; builds a plan per call. Prefer [`NufftPlan`] in loops.
pub fn adjoint(
    samples: &SampleVector,
    traj: &Trajectory,
    apply_dcf: bool,
    cfg: &GridderConfig,
) -> Result<ComplexImage> {
    NufftPlan::new(traj, cfg)?.adjoint(samples.view(), apply_dcf)
}

/// One-shot forward transform; builds a plan per call.
pub fn forward(
    image: &ComplexImage,
    traj: &Trajectory,
    cfg: &GridderConfig,
) -> Result<SampleVector> {
    NufftPlan::new(traj, cfg)?.forward(image.view())
}

/// Largest image edge accepted by the direct-summation oracle.
pub const ORACLE_MAX_EDGE: usize = 64;

/// Direct-summation transforms with the same normalization as the gridder.
/// `O(H W M)`; intended for tests.
pub mod oracle {
    use super::*;

    fn check_size(grid: GridSize) -> Result<()> {
        if grid.height > ORACLE_MAX_EDGE || grid.width > ORACLE_MAX_EDGE {
            return Err(Error::SizeLimitExceeded(format!(
                "{}x{}",
                grid.height, grid.width
            )));
        }
        Ok(())
    }

    fn centred(len: usize) -> Vec<f64> {
        (0..len).map(|u| u as f64 - (len / 2) as f64).collect()
    }

    pub fn forward(image: &ComplexImage, traj: &Trajectory) -> Result<SampleVector> {
        let grid = traj.grid();
        check_size(grid)?;
        if image.dim() != grid.dim() {
            return Err(Error::ShapeMismatch(
                "oracle image vs trajectory grid".into(),
            ));
        }
        let (us, vs) = (centred(grid.height), centred(grid.width));
        let scale = 1.0 / (grid.pixels() as f64).sqrt();
        Ok(Array2::from_shape_fn(
            (traj.arms(), traj.samples_per_arm()),
            |(i, s)| {
                let (kx, ky) = traj.point(i, s);
                let mut acc = ZERO;
                for (u, &uc) in us.iter().enumerate() {
                    for (v, &vc) in vs.iter().enumerate() {
                        acc += image[[u, v]]
                            * Complex64::from_polar(1.0, -2.0 * PI * (kx * uc + ky * vc));
                    }
                }
                acc * scale
            },
        ))
    }

    pub fn adjoint(
        samples: &SampleVector,
        traj: &Trajectory,
        apply_dcf: bool,
    ) -> Result<ComplexImage> {
        let grid = traj.grid();
        check_size(grid)?;
        if samples.dim() != (traj.arms(), traj.samples_per_arm()) {
            return Err(Error::ShapeMismatch("oracle samples vs trajectory".into()));
        }
        let (us, vs) = (centred(grid.height), centred(grid.width));
        let scale = 1.0 / (grid.pixels() as f64).sqrt();
        let dcf = traj.dcf();
        Ok(Array2::from_shape_fn(grid.dim(), |(u, v)| {
            let mut acc = ZERO;
            for ((i, s), &y) in samples.indexed_iter() {
                let (kx, ky) = traj.point(i, s);
                let w = if apply_dcf { dcf[[i, s]] } else { 1.0 };
                acc += y * w * Complex64::from_polar(1.0, 2.0 * PI * (kx * us[u] + ky * vs[v]));
            }
            acc * scale
        }))
    }
}
