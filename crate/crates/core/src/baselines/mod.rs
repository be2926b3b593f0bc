//! Classical reconstructions: gridding, wavelet compressed sensing and smoothed TV.
//!
//! Both iterative methods solve over complex images with the SENSE forward model
//! `A x = M F(S_c x)`, where `M` keeps only acquired arms and the data term uses
//! the measured samples without density compensation.

pub mod wavelet;

use std::time::Instant;

use ndarray::{s, Array2, Array3, Axis, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coil::{
    magnitude_normalize, sense_combine, sense_combine_complex, KSpaceFrame, SensitivityMaps,
};
use crate::error::{Error, Result};
use crate::fusion::{Method, ReconFrame};
use crate::metrics::psnr;
use crate::nufft::{ComplexImage, NufftPlan};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const POWER_SEED: u64 = 0x5eed_1a7e;
pub const POWER_STEPS: usize = 20;

/// Step size rule for the iterative solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    /// `1 / L` with `L` from power iteration on `A^H A`.
    Auto,
    /// Explicit Lipschitz constant of the data term.
    Lipschitz(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CSConfig {
    pub lambda: f64,
    pub iters: usize,
    pub step: StepSize,
    pub tv_epsilon: f64,
    pub wavelet_levels: usize,
    /// Record the objective after every iteration, not only the endpoints.
    #[serde(default)]
    pub trace: bool,
}

impl CSConfig {
    pub fn wavelet_default() -> Self {
        Self {
            lambda: 1e-3,
            iters: 100,
            step: StepSize::Auto,
            tv_epsilon: 1e-3,
            wavelet_levels: 3,
            trace: false,
        }
    }

    pub fn tv_default() -> Self {
        Self {
            lambda: 5e-4,
            ..Self::wavelet_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.tv_epsilon > 0.0) {
            return Err(Error::InvalidArgument("tv_epsilon must be positive".into()));
        }
        if self.wavelet_levels == 0 {
            return Err(Error::InvalidArgument(
                "wavelet_levels must be at least 1".into(),
            ));
        }
        if let StepSize::Lipschitz(l) = self.step {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::NonConvergentStep(format!("Lipschitz constant {l}")));
            }
        }
        Ok(())
    }
}

/// Result of an iterative solve.
#[derive(Debug, Clone)]
pub struct CsOutcome {
    pub frame: ReconFrame,
    /// Objective at iteration 0, then after each iteration if tracing, else at the end.
    pub objective: Vec<f64>,
    pub residual_initial: f64,
    pub residual_final: f64,
    pub lipschitz: f64,
}

/// Multi-coil SENSE encoding restricted to acquired arms.
pub struct SenseOperator<'a> {
    plan: &'a NufftPlan,
    maps: &'a SensitivityMaps,
    mask: Vec<f64>,
}

impl<'a> SenseOperator<'a> {
    pub fn new(plan: &'a NufftPlan, maps: &'a SensitivityMaps, acquired: &[bool]) -> Result<Self> {
        if acquired.len() != plan.trajectory().arms() {
            return Err(Error::ArmCountMismatch {
                expected: plan.trajectory().arms(),
                got: acquired.len(),
            });
        }
        if maps.grid() != plan.grid() {
            return Err(Error::ShapeMismatch(
                "sensitivity grid vs trajectory grid".into(),
            ));
        }
        Ok(Self {
            plan,
            maps,
            mask: acquired
                .iter()
                .map(|&a| if a { 1.0 } else { 0.0 })
                .collect(),
        })
    }

    pub fn forward(&self, x: &ComplexImage) -> Result<Array3<Complex64>> {
        let per: Vec<Array2<Complex64>> = (0..self.maps.coils())
            .into_par_iter()
            .map(|c| {
                let mut k = self.plan.forward((x * &self.maps.coil(c)).view())?;
                for (i, mut arm) in k.axis_iter_mut(Axis(0)).enumerate() {
                    if self.mask[i] == 0.0 {
                        arm.fill(ZERO);
                    }
                }
                Ok(k)
            })
            .collect::<Result<_>>()?;
        let (r, n) = (
            self.plan.trajectory().arms(),
            self.plan.trajectory().samples_per_arm(),
        );
        let mut out = Array3::zeros((per.len(), r, n));
        for (c, k) in per.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), c).assign(&k);
        }
        Ok(out)
    }

    pub fn adjoint(&self, k: &Array3<Complex64>) -> Result<ComplexImage> {
        let imgs: Vec<ComplexImage> = (0..self.maps.coils())
            .into_par_iter()
            .map(|c| {
                self.plan
                    .adjoint_weighted(k.index_axis(Axis(0), c), false, Some(&self.mask))
            })
            .collect::<Result<_>>()?;
        let mut out = ComplexImage::zeros(self.plan.grid().dim());
        for (c, img) in imgs.iter().enumerate() {
            Zip::from(&mut out)
                .and(img)
                .and(self.maps.coil(c))
                .for_each(|o, &x, &s| *o += s.conj() * x);
        }
        Ok(out)
    }

    pub fn normal(&self, x: &ComplexImage) -> Result<ComplexImage> {
        self.adjoint(&self.forward(x)?)
    }

    /// Measured samples on acquired arms.
    pub fn measured(&self, frame: &KSpaceFrame) -> Array3<Complex64> {
        let mut y = frame.data().clone();
        for (i, mut arm) in y.axis_iter_mut(Axis(1)).enumerate() {
            if self.mask[i] == 0.0 {
                arm.fill(ZERO);
            }
        }
        y
    }

    pub fn lipschitz(&self) -> Result<f64> {
        power_iteration_lipschitz(|x| self.normal(x), self.plan.grid().dim(), POWER_STEPS)
    }
}

fn inner(a: &ComplexImage, b: &ComplexImage) -> Complex64 {
    Zip::from(a)
        .and(b)
        .fold(ZERO, |acc, &x, &y| acc + x.conj() * y)
}

fn norm_sq<D: ndarray::Dimension>(x: &ndarray::Array<Complex64, D>) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum()
}

/// Rayleigh-quotient estimates of the largest eigenvalue of a positive
/// semidefinite operator, one per power-iteration step.
pub fn power_iteration_trace(
    normal: impl Fn(&ComplexImage) -> Result<ComplexImage>,
    dim: (usize, usize),
    steps: usize,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut x = ComplexImage::from_shape_fn(dim, |_| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps.max(1) {
        let n = norm_sq(&x).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::NonConvergentStep(
                "power iteration collapsed to zero".into(),
            ));
        }
        x.mapv_inplace(|z| z / n);
        let y = normal(&x)?;
        out.push(inner(&x, &y).re);
        x = y;
    }
    Ok(out)
}

/// Largest eigenvalue of `A^H A` by power iteration from a fixed seed.
pub fn power_iteration_lipschitz(
    normal: impl Fn(&ComplexImage) -> Result<ComplexImage>,
    dim: (usize, usize),
    steps: usize,
) -> Result<f64> {
    let l = *power_iteration_trace(normal, dim, steps)?
        .last()
        .expect("at least one step");
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::NonConvergentStep(format!("Lipschitz estimate {l}")));
    }
    Ok(l)
}

/// Plain SENSE-weighted gridding: one adjoint pass.
pub fn recon_gridding(
    frame: &KSpaceFrame,
    plan: &NufftPlan,
    maps: &SensitivityMaps,
) -> Result<ReconFrame> {
    let t0 = Instant::now();
    let mut r = sense_combine(frame, plan, maps)?;
    r.wall_time_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(r)
}

struct Problem<'a> {
    op: SenseOperator<'a>,
    y: Array3<Complex64>,
    x0: ComplexImage,
    lipschitz: f64,
}

fn setup<'a>(
    frame: &KSpaceFrame,
    plan: &'a NufftPlan,
    maps: &'a SensitivityMaps,
    cfg: &CSConfig,
) -> Result<Problem<'a>> {
    cfg.validate()?;
    let op = SenseOperator::new(plan, maps, frame.acquired())?;
    if frame.coils() != maps.coils() {
        return Err(Error::ShapeMismatch(format!(
            "{} coils vs {} maps",
            frame.coils(),
            maps.coils()
        )));
    }
    let y = op.measured(frame);
    let xg = sense_combine_complex(frame, plan, maps, None)?;
    let axg = op.forward(&xg)?;
    let den = norm_sq(&axg);
    // Least-squares complex scale so the gridding image starts data-consistent in level.
    let x0 = if den > 0.0 {
        let c = Zip::from(&axg)
            .and(&y)
            .fold(ZERO, |acc, &a, &b| acc + a.conj() * b)
            / den;
        xg.mapv(|z| z * c)
    } else {
        ComplexImage::zeros(xg.dim())
    };
    let lipschitz = match cfg.step {
        StepSize::Auto => op.lipschitz()?,
        StepSize::Lipschitz(l) => l,
    };
    Ok(Problem {
        op,
        y,
        x0,
        lipschitz,
    })
}

fn residual(
    op: &SenseOperator<'_>,
    x: &ComplexImage,
    y: &Array3<Complex64>,
) -> Result<Array3<Complex64>> {
    Ok(op.forward(x)? - y)
}

fn finish(x: &ComplexImage, method: Method, t0: Instant) -> ReconFrame {
    let mut r = ReconFrame::new(magnitude_normalize(x), method);
    r.wall_time_ms = t0.elapsed().as_secs_f64() * 1e3;
    r
}

/// Zero-padded embedding into the wavelet grid (top-left corner).
fn embed(x: &ComplexImage, edge: usize) -> Array2<Complex64> {
    let mut out = Array2::zeros((edge, edge));
    out.slice_mut(s![..x.nrows(), ..x.ncols()]).assign(x);
    out
}

fn crop(x: &Array2<Complex64>, dim: (usize, usize)) -> ComplexImage {
    x.slice(s![..dim.0, ..dim.1]).to_owned()
}

fn soft_threshold(z: Complex64, tau: f64) -> Complex64 {
    let r = z.norm();
    if r <= tau {
        ZERO
    } else {
        z * ((r - tau) / r)
    }
}

/// Wavelet-regularized least squares by FISTA in the wavelet domain.
pub fn recon_wavelet(
    frame: &KSpaceFrame,
    plan: &NufftPlan,
    maps: &SensitivityMaps,
    cfg: &CSConfig,
) -> Result<CsOutcome> {
    let t0 = Instant::now();
    let p = setup(frame, plan, maps, cfg)?;
    let dim = plan.grid().dim();
    let levels = cfg.wavelet_levels;
    let edge = wavelet::padded_edge(dim.0.max(dim.1), levels);
    let synth = |a: &Array2<Complex64>| -> Result<ComplexImage> {
        Ok(crop(&wavelet::inverse(a, levels)?, dim))
    };
    let objective = |a: &Array2<Complex64>| -> Result<(f64, f64)> {
        let r = residual(&p.op, &synth(a)?, &p.y)?;
        let data = norm_sq(&r);
        Ok((
            0.5 * data + cfg.lambda * a.iter().map(|z| z.norm()).sum::<f64>(),
            data.sqrt(),
        ))
    };

    let mut alpha = wavelet::forward(&embed(&p.x0, edge), levels)?;
    let (obj0, res0) = objective(&alpha)?;
    let mut trace = vec![obj0];
    if cfg.iters == 0 {
        let mut frame = recon_gridding(frame, plan, maps)?;
        frame.method = Method::Wavelet;
        return Ok(CsOutcome {
            frame,
            objective: trace,
            residual_initial: res0,
            residual_final: res0,
            lipschitz: p.lipschitz,
        });
    }
    let step = 1.0 / p.lipschitz;
    let tau = cfg.lambda * step;
    let mut prev = alpha.clone();
    let mut t = 1.0f64;
    for it in 0..cfg.iters {
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mom = (t - 1.0) / t_next;
        let z = Zip::from(&alpha)
            .and(&prev)
            .map_collect(|&a, &b| a + (a - b) * mom);
        let r = residual(&p.op, &synth(&z)?, &p.y)?;
        let grad = wavelet::forward(&embed(&p.op.adjoint(&r)?, edge), levels)?;
        prev = std::mem::replace(
            &mut alpha,
            Zip::from(&z)
                .and(&grad)
                .map_collect(|&z, &g| soft_threshold(z - g * step, tau)),
        );
        t = t_next;
        if cfg.trace || it + 1 == cfg.iters {
            trace.push(objective(&alpha)?.0);
        }
    }
    let x = synth(&alpha)?;
    let res1 = norm_sq(&residual(&p.op, &x, &p.y)?).sqrt();
    Ok(CsOutcome {
        frame: finish(&x, Method::Wavelet, t0),
        objective: trace,
        residual_initial: res0,
        residual_final: res1,
        lipschitz: p.lipschitz,
    })
}

/// Forward differences along rows and columns, zero at the last row/column.
fn gradients(x: &ComplexImage) -> (ComplexImage, ComplexImage) {
    let (h, w) = x.dim();
    let dh = ComplexImage::from_shape_fn((h, w), |(i, j)| {
        if j + 1 < w {
            x[[i, j + 1]] - x[[i, j]]
        } else {
            ZERO
        }
    });
    let dv = ComplexImage::from_shape_fn((h, w), |(i, j)| {
        if i + 1 < h {
            x[[i + 1, j]] - x[[i, j]]
        } else {
            ZERO
        }
    });
    (dh, dv)
}

/// Smoothed isotropic TV and its gradient.
pub fn tv_value_grad(x: &ComplexImage, eps: f64) -> (f64, ComplexImage) {
    let (h, w) = x.dim();
    let (dh, dv) = gradients(x);
    let phi = Zip::from(&dh)
        .and(&dv)
        .map_collect(|a, b| (a.norm_sqr() + b.norm_sqr() + eps * eps).sqrt());
    let value = phi.sum();
    let ph = Zip::from(&dh).and(&phi).map_collect(|&d, &p| d / p);
    let pv = Zip::from(&dv).and(&phi).map_collect(|&d, &p| d / p);
    // Adjoint of the forward differences.
    let grad = ComplexImage::from_shape_fn((h, w), |(i, j)| {
        let mut g = ZERO;
        if j + 1 < w {
            g -= ph[[i, j]];
        }
        if j > 0 {
            g += ph[[i, j - 1]];
        }
        if i + 1 < h {
            g -= pv[[i, j]];
        }
        if i > 0 {
            g += pv[[i - 1, j]];
        }
        g
    });
    (value, grad)
}

/// Backtracking gradient step from `x` (with residual `r = A x - y`).
struct TvStep {
    x: ComplexImage,
    r: Array3<Complex64>,
    f: f64,
    step: f64,
}

fn tv_objective(r: &Array3<Complex64>, x: &ComplexImage, lambda: f64, eps: f64) -> f64 {
    0.5 * norm_sq(r) + lambda * tv_value_grad(x, eps).0
}

fn tv_gradient_step(
    op: &SenseOperator<'_>,
    x: &ComplexImage,
    r: &Array3<Complex64>,
    f: f64,
    step0: f64,
    lambda: f64,
    eps: f64,
) -> Result<Option<TvStep>> {
    let (_, g_tv) = tv_value_grad(x, eps);
    let g = Zip::from(&op.adjoint(r)?)
        .and(&g_tv)
        .map_collect(|&a, &b| a + b * lambda);
    let g2 = norm_sq(&g);
    if g2 == 0.0 {
        return Ok(None);
    }
    // The residual is affine in x, so every trial step reuses A g.
    let ag = op.forward(&g)?;
    let mut step = step0;
    for _ in 0..60 {
        let xc = Zip::from(x).and(&g).map_collect(|&x, &g| x - g * step);
        let rc = Zip::from(r).and(&ag).map_collect(|&r, &a| r - a * step);
        let fc = tv_objective(&rc, &xc, lambda, eps);
        if fc <= f - 0.5 * step * g2 {
            return Ok(Some(TvStep {
                x: xc,
                r: rc,
                f: fc,
                step,
            }));
        }
        step *= 0.5;
    }
    Ok(None)
}

/// Smoothed-TV regularized least squares by gradient descent with Armijo
/// backtracking and Nesterov momentum. A momentum step that would raise the
/// objective is replaced by a plain step, so the objective never increases.
pub fn recon_tv(
    frame: &KSpaceFrame,
    plan: &NufftPlan,
    maps: &SensitivityMaps,
    cfg: &CSConfig,
) -> Result<CsOutcome> {
    let t0 = Instant::now();
    let p = setup(frame, plan, maps, cfg)?;
    let (eps, lambda) = (cfg.tv_epsilon, cfg.lambda);
    let mut x = p.x0.clone();
    let mut r = residual(&p.op, &x, &p.y)?;
    let res0 = norm_sq(&r).sqrt();
    let mut f = tv_objective(&r, &x, lambda, eps);
    let mut trace = vec![f];
    if cfg.iters == 0 {
        let mut frame = recon_gridding(frame, plan, maps)?;
        frame.method = Method::Tv;
        return Ok(CsOutcome {
            frame,
            objective: trace,
            residual_initial: res0,
            residual_final: res0,
            lipschitz: p.lipschitz,
        });
    }
    let max_step = 1.0 / p.lipschitz;
    let mut step = max_step;
    let (mut x_prev, mut r_prev) = (x.clone(), r.clone());
    let mut t = 1.0f64;
    for it in 0..cfg.iters {
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        let trial = (step * 2.0).min(max_step);
        let mut next = None;
        if beta > 0.0 {
            let y = Zip::from(&x)
                .and(&x_prev)
                .map_collect(|&a, &b| a + (a - b) * beta);
            let ry = Zip::from(&r)
                .and(&r_prev)
                .map_collect(|&a, &b| a + (a - b) * beta);
            let fy = tv_objective(&ry, &y, lambda, eps);
            next = tv_gradient_step(&p.op, &y, &ry, fy, trial, lambda, eps)?.filter(|s| s.f <= f);
        }
        let next = match next {
            Some(s) => {
                t = t_next;
                Some(s)
            }
            None => {
                // Restart momentum only when it was tried and failed.
                t = if beta > 0.0 { 1.0 } else { t_next };
                tv_gradient_step(&p.op, &x, &r, f, trial, lambda, eps)?
            }
        };
        let Some(s) = next else {
            break;
        };
        x_prev = std::mem::replace(&mut x, s.x);
        r_prev = std::mem::replace(&mut r, s.r);
        f = s.f;
        step = s.step;
        if cfg.trace || it + 1 == cfg.iters {
            trace.push(f);
        }
    }
    if trace.len() == 1 {
        trace.push(f);
    }
    Ok(CsOutcome {
        frame: finish(&x, Method::Tv, t0),
        objective: trace,
        residual_initial: res0,
        residual_final: norm_sq(&r).sqrt(),
        lipschitz: p.lipschitz,
    })
}

/// Iterative baseline selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsMethod {
    Wavelet,
    Tv,
}

impl CsMethod {
    pub fn run(
        self,
        frame: &KSpaceFrame,
        plan: &NufftPlan,
        maps: &SensitivityMaps,
        cfg: &CSConfig,
    ) -> Result<CsOutcome> {
        match self {
            Self::Wavelet => recon_wavelet(frame, plan, maps, cfg),
            Self::Tv => recon_tv(frame, plan, maps, cfg),
        }
    }
}

/// Picks the `lambda` with the highest mean PSNR over validation frames.
/// Returns the winner and the score of every candidate.
pub fn tune_lambda(
    method: CsMethod,
    candidates: &[f64],
    frames: &[(&KSpaceFrame, &Array2<f64>)],
    plan: &NufftPlan,
    maps: &SensitivityMaps,
    base: &CSConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if candidates.is_empty() || frames.is_empty() {
        return Err(Error::EmptyInput(
            "lambda search needs candidates and frames".into(),
        ));
    }
    let mut cfg = base.clone();
    if cfg.step == StepSize::Auto {
        let op = SenseOperator::new(plan, maps, frames[0].0.acquired())?;
        cfg.step = StepSize::Lipschitz(op.lipschitz()?);
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for &lambda in candidates {
        cfg.lambda = lambda;
        let mut total = 0.0;
        for (f, reference) in frames {
            let out = method.run(f, plan, maps, &cfg)?;
            total += psnr(out.frame.image.view(), reference.view(), 1.0)?;
        }
        scores.push((lambda, total / frames.len() as f64));
    }
    let best = scores
        .iter()
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty")
        .0;
    Ok((best, scores))
}
