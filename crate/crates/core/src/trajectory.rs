//! Spiral trajectories, density compensation and frame/audio alignment.

use std::f64::consts::PI;
use std::ops::Range;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spiral arms that complete one full rotation of k-space.
pub const ARMS_PER_FRAME: usize = 13;
/// Effective frame rate of one 13-arm acquisition window.
pub const FRAME_RATE_FPS: f64 = 12.81;
/// Rate of the 2-arm reference reconstructions and masks.
pub const REFERENCE_RATE_FPS: f64 = 83.28;
/// Audio sample rate used throughout.
pub const AUDIO_SAMPLE_RATE: u32 = 16_000;
/// Default half-width of the audio context window, in seconds.
pub const DEFAULT_AUDIO_HALF_WINDOW: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSize {
    pub height: usize,
    pub width: usize,
}

impl GridSize {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn square(n: usize) -> Self {
        Self::new(n, n)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Per-arm k-space coordinates (`[arms, samples, 2]`, cycles per pixel) and
/// density-compensation weights (`[arms, samples]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    coords: Array3<f64>,
    dcf: Array2<f64>,
    grid: GridSize,
}

impl Trajectory {
    pub fn new(coords: Array3<f64>, dcf: Array2<f64>, grid: GridSize) -> Result<Self> {
        let (arms, samples, two) = coords.dim();
        if two != 2 {
            return Err(Error::ShapeMismatch(format!(
                "trajectory coordinates must have a trailing axis of 2, got {two}"
            )));
        }
        if arms == 0 || samples == 0 || grid.height == 0 || grid.width == 0 {
            return Err(Error::InvalidArgument("empty trajectory or grid".into()));
        }
        if dcf.dim() != (arms, samples) {
            return Err(Error::ShapeMismatch(format!(
                "dcf shape {:?} does not match coordinates ({arms}, {samples})",
                dcf.dim()
            )));
        }
        if let Some(c) = coords
            .iter()
            .find(|c| !c.is_finite() || c.abs() > 0.5 + 1e-12)
        {
            return Err(Error::RangeViolation(format!(
                "k-space coordinate {c} outside [-0.5, 0.5]"
            )));
        }
        if let Some(w) = dcf.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::RangeViolation(format!(
                "density weight {w} is negative or non-finite"
            )));
        }
        Ok(Self { coords, dcf, grid })
    }

    /// Builds a trajectory with radial-ramp density compensation.
    pub fn with_ramp_dcf(coords: Array3<f64>, grid: GridSize) -> Result<Self> {
        let (arms, samples, _) = coords.dim();
        let traj = Self::new(coords, Array2::zeros((arms, samples)), grid)?;
        Ok(density_compensation(traj))
    }

    pub fn coords(&self) -> &Array3<f64> {
        &self.coords
    }

    pub fn dcf(&self) -> &Array2<f64> {
        &self.dcf
    }

    pub fn grid(&self) -> GridSize {
        self.grid
    }

    pub fn arms(&self) -> usize {
        self.coords.dim().0
    }

    pub fn samples_per_arm(&self) -> usize {
        self.coords.dim().1
    }

    pub fn len(&self) -> usize {
        self.arms() * self.samples_per_arm()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, arm: usize, sample: usize) -> (f64, f64) {
        (self.coords[[arm, sample, 0]], self.coords[[arm, sample, 1]])
    }
}

/// Archimedean spiral `r = s/2`, `theta = 2 pi turns s`, `s` uniform on `[0, 1]`,
/// interleaved by rotating the base arm through `2 pi i / arms`.
pub fn gen_spiral(
    arms: usize,
    samples_per_arm: usize,
    turns: f64,
    grid: GridSize,
) -> Result<Trajectory> {
    if arms == 0 {
        return Err(Error::InvalidArgument("arms must be at least 1".into()));
    }
    if samples_per_arm < 2 {
        return Err(Error::InvalidArgument(
            "samples_per_arm must be at least 2".into(),
        ));
    }
    if !(turns > 0.0 && turns.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "turns must be positive, got {turns}"
        )));
    }
    if grid.height == 0 || grid.width == 0 {
        return Err(Error::InvalidArgument(
            "grid dimensions must be positive".into(),
        ));
    }
    let mut coords = Array3::zeros((arms, samples_per_arm, 2));
    let last = (samples_per_arm - 1) as f64;
    for i in 0..arms {
        let rot = 2.0 * PI * i as f64 / arms as f64;
        for n in 0..samples_per_arm {
            let s = n as f64 / last;
            let r = 0.5 * s;
            let theta = 2.0 * PI * turns * s + rot;
            // Clamp guards against 0.5000000000000001 from rounding.
            coords[[i, n, 0]] = (r * theta.cos()).clamp(-0.5, 0.5);
            coords[[i, n, 1]] = (r * theta.sin()).clamp(-0.5, 0.5);
        }
    }
    Trajectory::with_ramp_dcf(coords, grid)
}

/// Radial-ramp weights `|k|`, mean-normalized to 1.
///
/// A sample sitting exactly on the origin at the start of an arm takes half the
/// weight of the next sample on that arm.
pub fn density_compensation(traj: Trajectory) -> Trajectory {
    let (arms, samples, _) = traj.coords.dim();
    let mut dcf = Array2::zeros((arms, samples));
    for i in 0..arms {
        for n in 0..samples {
            let (kx, ky) = traj.point(i, n);
            dcf[[i, n]] = kx.hypot(ky);
        }
        if samples > 1 && dcf[[i, 0]] == 0.0 {
            dcf[[i, 0]] = 0.5 * dcf[[i, 1]];
        }
    }
    let mean = dcf.mean().unwrap_or(0.0);
    if mean > 0.0 {
        dcf.mapv_inplace(|w| w / mean);
    } else {
        dcf.fill(1.0);
    }
    Trajectory { dcf, ..traj }
}

/// One frame's share of the continuous arm stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArmGroup {
    pub frame_id: usize,
    pub arms: Range<usize>,
}

/// Partitions an arm stream into consecutive blocks of `arms_per_frame`,
/// discarding a trailing partial block.
pub fn group_frames(arm_stream_length: usize, arms_per_frame: usize) -> Result<Vec<ArmGroup>> {
    if arms_per_frame == 0 {
        return Err(Error::InvalidArgument(
            "arms_per_frame must be positive".into(),
        ));
    }
    if arm_stream_length < arms_per_frame {
        return Err(Error::EmptyInput(format!(
            "{arm_stream_length} arms cannot fill one {arms_per_frame}-arm frame"
        )));
    }
    Ok((0..arm_stream_length / arms_per_frame)
        .map(|t| ArmGroup {
            frame_id: t,
            arms: t * arms_per_frame..(t + 1) * arms_per_frame,
        })
        .collect())
}

/// Index of the reference timestamp `j / ref_rate` nearest to `center`.
/// Ties go to the smaller index.
pub fn align_reference(center: f64, ref_rate: f64) -> usize {
    debug_assert!(center >= 0.0 && ref_rate > 0.0);
    let guess = (center * ref_rate).floor().max(0.0) as usize;
    let lo = guess.saturating_sub(1);
    let mut best = lo;
    let mut best_dist = f64::INFINITY;
    for j in lo..=guess + 1 {
        let dist = (j as f64 / ref_rate - center).abs();
        if dist < best_dist {
            best = j;
            best_dist = dist;
        }
    }
    best
}

/// Symmetric audio context `[center - half, center + half]`, clipped to the recording.
pub fn audio_window(center: f64, half_width: f64, audio_len: f64) -> (f64, f64) {
    debug_assert!(half_width > 0.0);
    (
        (center - half_width).max(0.0),
        (center + half_width).min(audio_len),
    )
}

/// Timing bookkeeping for one reconstructed frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameIndex {
    pub frame_id: usize,
    pub arm_ids: Range<usize>,
    /// Temporal centre of the acquisition window, seconds.
    pub center_time: f64,
    pub ref_index: usize,
    pub audio_span: (f64, f64),
}

/// Attaches timing to arm groups for a stream sampled at `frame_rate` frames per second.
pub fn index_frames(
    groups: &[ArmGroup],
    frame_rate: f64,
    ref_rate: f64,
    half_width: f64,
    audio_len: f64,
) -> Vec<FrameIndex> {
    groups
        .iter()
        .map(|g| {
            let center = (g.frame_id as f64 + 0.5) / frame_rate;
            FrameIndex {
                frame_id: g.frame_id,
                arm_ids: g.arms.clone(),
                center_time: center,
                ref_index: align_reference(center, ref_rate),
                audio_span: audio_window(center, half_width, audio_len),
            }
        })
        .collect()
}
