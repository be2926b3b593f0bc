//! Distortion metrics and timing statistics.

use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Method;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 300.0;
/// Per-frame budget for 30 frames per second.
pub const REALTIME_MS: f64 = 1000.0 / 30.0;

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const LOG_SIZE: usize = 15;
const LOG_SIGMA: f64 = 1.5;

fn check_shapes(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("metric on empty image".into()));
    }
    Ok(())
}

pub fn mse(pred: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(&pred, &reference)?;
    let sse = Zip::from(&pred)
        .and(&reference)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
    Ok(sse / pred.len() as f64)
}

/// `10 log10(peak^2 / MSE)`, capped for a zero error.
pub fn psnr(pred: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "peak must be positive, got {peak}"
        )));
    }
    let m = mse(pred, reference)?;
    Ok(if m == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB)
    })
}

/// `||pred - ref||^2 / ||ref||^2`.
pub fn nmse(pred: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(&pred, &reference)?;
    let den: f64 = reference.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(mse(pred, reference)? * pred.len() as f64 / den)
}

/// Peak-normalized RMSE with peak 1.
pub fn nrmse(pred: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(mse(pred, reference)?.sqrt())
}

/// Normalized 1-D Gaussian of `len` taps centred in the window.
fn gaussian_window(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable filtering keeping only positions where the window fits.
fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let n = taps.len();
    let (h, w) = x.dim();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(i, j)| {
        (0..n).map(|k| taps[k] * x[[i, j + k]]).sum()
    });
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        (0..n).map(|k| taps[k] * rows[[i + k, j]]).sum()
    })
}

/// Mean SSIM over valid 11x11 Gaussian windows, dynamic range 1.
pub fn ssim(pred: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(&pred, &reference)?;
    let (h, w) = pred.dim();
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WIN}x{SSIM_WIN} pixels"
        )));
    }
    let taps = gaussian_window(SSIM_WIN, SSIM_SIGMA);
    let (a, b) = (pred.to_owned(), reference.to_owned());
    let mu_a = filter_valid(&a, &taps);
    let mu_b = filter_valid(&b, &taps);
    let aa = filter_valid(&(&a * &a), &taps);
    let bb = filter_valid(&(&b * &b), &taps);
    let ab = filter_valid(&(&a * &b), &taps);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut total = 0.0;
    for idx in 0..mu_a.len() {
        let (i, j) = (idx / mu_a.ncols(), idx % mu_a.ncols());
        let (ma, mb) = (mu_a[[i, j]], mu_b[[i, j]]);
        let va = aa[[i, j]] - ma * ma;
        let vb = bb[[i, j]] - mb * mb;
        let cov = ab[[i, j]] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Zero-sum 15x15 Laplacian-of-Gaussian kernel.
pub fn log_kernel() -> Array2<f64> {
    let c = (LOG_SIZE as f64 - 1.0) / 2.0;
    let s2 = LOG_SIGMA * LOG_SIGMA;
    let mut k = Array2::from_shape_fn((LOG_SIZE, LOG_SIZE), |(i, j)| {
        let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
        (r2 - 2.0 * s2) / (s2 * s2) * (-r2 / (2.0 * s2)).exp()
    });
    let mean = k.mean().unwrap_or(0.0);
    k.mapv_inplace(|v| v - mean);
    k
}

/// Same-size 2-D correlation with zero padding.
fn filter_same(x: &ArrayView2<'_, f64>, k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let r = (k.nrows() / 2) as isize;
    let mut padded = Array2::zeros((h + 2 * r as usize, w + 2 * r as usize));
    padded
        .slice_mut(s![r..r + h as isize, r..r + w as isize])
        .assign(x);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let win = padded.slice(s![i..i + k.nrows(), j..j + k.ncols()]);
        Zip::from(&win).and(k).fold(0.0, |acc, &a, &b| acc + a * b)
    })
}

/// Relative L2 error of LoG-filtered images; `None` when the reference has no
/// high-frequency content (constant image).
pub fn hfen(pred: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Result<Option<f64>> {
    check_shapes(&pred, &reference)?;
    let k = log_kernel();
    let lp = filter_same(&pred, &k);
    let lr = filter_same(&reference, &k);
    let den = lr.iter().map(|v| v * v).sum::<f64>().sqrt();
    // A constant reference only responds at the zero-padded border.
    if den == 0.0 || is_constant(&reference) {
        return Ok(None);
    }
    let num = Zip::from(&lp)
        .and(&lr)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b))
        .sqrt();
    Ok(Some(num / den))
}

fn is_constant(x: &ArrayView2<'_, f64>) -> bool {
    let first = x[[0, 0]];
    x.iter().all(|v| *v == first)
}

/// All per-frame metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub mse: f64,
    pub nmse: Option<f64>,
    pub nrmse: f64,
    pub ssim: f64,
    pub hfen: Option<f64>,
}

pub fn frame_metrics(
    pred: ArrayView2<'_, f64>,
    reference: ArrayView2<'_, f64>,
) -> Result<FrameMetrics> {
    Ok(FrameMetrics {
        psnr: psnr(pred, reference, 1.0)?,
        mse: mse(pred, reference)?,
        nmse: match nmse(pred, reference) {
            Ok(v) => Some(v),
            Err(Error::ZeroReference) => None,
            Err(e) => return Err(e),
        },
        nrmse: nrmse(pred, reference)?,
        ssim: ssim(pred, reference)?,
        hfen: hfen(pred, reference)?,
    })
}

/// Mean of each metric, skipping undefined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub psnr: f64,
    pub mse: f64,
    pub nmse: Option<f64>,
    pub nrmse: f64,
    pub ssim: f64,
    pub hfen: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricMeans {
    fn of(items: &[MetricMeans]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        Some(Self {
            psnr: mean(items.iter().map(|m| m.psnr))?,
            mse: mean(items.iter().map(|m| m.mse))?,
            nmse: mean(items.iter().filter_map(|m| m.nmse)),
            nrmse: mean(items.iter().map(|m| m.nrmse))?,
            ssim: mean(items.iter().map(|m| m.ssim))?,
            hfen: mean(items.iter().filter_map(|m| m.hfen)),
        })
    }

    fn of_frames(items: &[FrameMetrics]) -> Option<Self> {
        let as_means: Vec<MetricMeans> = items
            .iter()
            .map(|f| MetricMeans {
                psnr: f.psnr,
                mse: f.mse,
                nmse: f.nmse,
                nrmse: f.nrmse,
                ssim: f.ssim,
                hfen: f.hfen,
            })
            .collect();
        Self::of(&as_means)
    }
}

/// Timing summary over frames, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub samples: usize,
}

impl TimingStats {
    pub fn from_samples(ms: &[f64]) -> Option<Self> {
        let m = mean(ms.iter().copied())?;
        let var = ms.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ms.len() as f64;
        Some(Self {
            mean_ms: m,
            std_ms: var.sqrt(),
            samples: ms.len(),
        })
    }

    pub fn fps(&self) -> f64 {
        if self.mean_ms > 0.0 {
            1000.0 / self.mean_ms
        } else {
            f64::INFINITY
        }
    }

    pub fn realtime(&self) -> bool {
        self.mean_ms < REALTIME_MS
    }
}

/// Times `f` on every item `repetitions` times after one untimed warm-up call.
pub fn time_per_item<I, T>(
    items: &[I],
    repetitions: usize,
    mut f: impl FnMut(&I) -> Result<T>,
) -> Result<(Vec<T>, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::EmptyInput("nothing to benchmark".into()));
    }
    f(&items[0])?;
    let mut out = Vec::with_capacity(items.len());
    let mut times = Vec::with_capacity(items.len() * repetitions.max(1));
    for rep in 0..repetitions.max(1) {
        for item in items {
            let t0 = Instant::now();
            let r = f(item)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
            if rep == 0 {
                out.push(r);
            }
        }
    }
    Ok((out, times))
}

/// Metrics of one sequence under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub sequence: String,
    pub frames: Vec<FrameMetrics>,
    pub means: MetricMeans,
    pub timing: Option<TimingStats>,
}

impl SequenceReport {
    pub fn new(
        sequence: impl Into<String>,
        frames: Vec<FrameMetrics>,
        timing: Option<TimingStats>,
    ) -> Result<Self> {
        let means = MetricMeans::of_frames(&frames)
            .ok_or_else(|| Error::EmptyInput("sequence without frames".into()))?;
        Ok(Self {
            sequence: sequence.into(),
            frames,
            means,
            timing,
        })
    }
}

/// Per-sequence results and their aggregate for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: Method,
    pub sequences: Vec<SequenceReport>,
    pub aggregate: MetricMeans,
    pub timing: Option<TimingStats>,
}

impl MetricReport {
    pub fn new(method: Method, sequences: Vec<SequenceReport>) -> Result<Self> {
        let means: Vec<MetricMeans> = sequences.iter().map(|s| s.means).collect();
        let aggregate = MetricMeans::of(&means)
            .ok_or_else(|| Error::EmptyInput("report without sequences".into()))?;
        let timing = if sequences.iter().all(|s| s.timing.is_some()) {
            let per_seq: Vec<TimingStats> = sequences.iter().filter_map(|s| s.timing).collect();
            mean(per_seq.iter().map(|t| t.mean_ms)).map(|m| TimingStats {
                mean_ms: m,
                std_ms: mean(per_seq.iter().map(|t| t.std_ms)).unwrap_or(0.0),
                samples: per_seq.iter().map(|t| t.samples).sum(),
            })
        } else {
            None
        };
        Ok(Self {
            method,
            sequences,
            aggregate,
            timing,
        })
    }
}
