//! WAV input, PNG and CSV output.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;

use sirem_core::trajectory::AUDIO_SAMPLE_RATE;

use super::IoError;

/// Reads 16-bit PCM mono audio at 16 kHz as samples in `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<Vec<f32>, IoError> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| IoError::Media(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(IoError::Media(format!(
            "{}: expected 16-bit PCM mono, got {} channel(s) of {}-bit {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    if spec.sample_rate != AUDIO_SAMPLE_RATE {
        return Err(IoError::Media(format!(
            "{}: sample rate {} Hz, expected {AUDIO_SAMPLE_RATE} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<_, _>>()
        .map_err(|e| IoError::Media(format!("{}: {e}", path.display())))
}

/// Writes an image in `[0, 1]` as 8-bit grayscale.
pub fn write_png(path: &Path, image: &Array2<f64>) -> Result<(), IoError> {
    let (h, w) = image.dim();
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let pixels: Vec<u8> = image
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut writer = enc
        .write_header()
        .map_err(|e| IoError::Media(e.to_string()))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| IoError::Media(e.to_string()))?;
    writer.finish().map_err(|e| IoError::Media(e.to_string()))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| IoError::Media(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| IoError::Media(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}
