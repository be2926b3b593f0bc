//! Log-mel filterbank features, the built-in speech encoder.

use std::f64::consts::PI;
use std::sync::OnceLock;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use super::{FeatureSequence, FeatureSource};
use crate::error::{Error, Result};
use crate::trajectory::AUDIO_SAMPLE_RATE;

/// 25 ms at 16 kHz.
pub const FRAME_LEN: usize = 400;
/// 10 ms at 16 kHz.
pub const FRAME_HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const MEL_BANDS: usize = 64;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Edge frequencies of the triangular filters, `MEL_BANDS + 2` values from 0 to Nyquist.
fn mel_edges() -> Vec<f64> {
    let top = hz_to_mel(AUDIO_SAMPLE_RATE as f64 / 2.0);
    (0..MEL_BANDS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (MEL_BANDS + 1) as f64))
        .collect()
}

/// Center frequency in Hz of each mel band.
pub fn mel_band_centers() -> Vec<f64> {
    mel_edges()[1..=MEL_BANDS].to_vec()
}

/// Filterbank weights `[MEL_BANDS, FFT_SIZE / 2 + 1]`.
fn filterbank() -> &'static Array2<f64> {
    static BANK: OnceLock<Array2<f64>> = OnceLock::new();
    BANK.get_or_init(|| {
        let edges = mel_edges();
        let bins = FFT_SIZE / 2 + 1;
        Array2::from_shape_fn((MEL_BANDS, bins), |(m, k)| {
            let f = k as f64 * AUDIO_SAMPLE_RATE as f64 / FFT_SIZE as f64;
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            }
        })
    })
}

/// `log(1 + mel(|STFT|))` of a 16 kHz waveform, one row per 10 ms hop.
pub fn encode_mel(waveform: &[f32]) -> Result<FeatureSequence> {
    if waveform.len() < FRAME_LEN {
        return Err(Error::TooShortInput(format!(
            "waveform has {} samples, need at least {FRAME_LEN}",
            waveform.len()
        )));
    }
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("waveform".into()));
    }
    let frames = (waveform.len() - FRAME_LEN) / FRAME_HOP + 1;
    let window: Vec<f64> = (0..FRAME_LEN)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / FRAME_LEN as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let bank = filterbank();
    let bins = FFT_SIZE / 2 + 1;
    let mut out = Array2::<f32>::zeros((frames, MEL_BANDS));
    let mut buf = vec![Complex64::new(0.0, 0.0); FFT_SIZE];
    let mut mag = vec![0.0; bins];
    for t in 0..frames {
        buf.fill(Complex64::new(0.0, 0.0));
        let seg = &waveform[t * FRAME_HOP..t * FRAME_HOP + FRAME_LEN];
        for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&window) {
            b.re = x as f64 * w;
        }
        fft.process(&mut buf);
        for (m, z) in mag.iter_mut().zip(&buf) {
            *m = z.norm();
        }
        for (b, row) in bank.rows().into_iter().enumerate() {
            let e: f64 = row.iter().zip(&mag).map(|(w, m)| w * m).sum();
            out[[t, b]] = e.ln_1p() as f32;
        }
    }
    FeatureSequence::new(out, FeatureSource::Mel)
}
