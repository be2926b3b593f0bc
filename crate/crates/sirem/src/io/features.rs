//! Feature files: one `[L, d]` f32 array per audio window, named `window_0000`,
//! `window_0001`, ..., with `feature_dim` declared in the manifest metadata.

use std::path::Path;

use ndarray::Ix2;
use serde_json::Value;

use sirem_core::audio::{FeatureSequence, FeatureSource};

use super::{ArrayDir, IoError};

pub const FEATURE_KIND: &str = "sirem-features";

fn window_name(i: usize) -> String {
    format!("window_{i:04}")
}

/// Writes feature windows; `bounds` are the `(start, end)` times of each window in seconds.
pub fn write_feature_windows(
    dir: &Path,
    windows: &[FeatureSequence],
    bounds: Option<&[(f64, f64)]>,
    encoder: &str,
) -> Result<(), IoError> {
    let first = windows
        .first()
        .ok_or_else(|| IoError::Schema("no feature windows to write".into()))?;
    let d = first.dim();
    if let Some(w) = windows.iter().find(|w| w.dim() != d) {
        return Err(IoError::Schema(format!(
            "feature windows mix dimensions {d} and {}",
            w.dim()
        )));
    }
    if bounds.is_some_and(|b| b.len() != windows.len()) {
        return Err(IoError::Schema(
            "window bounds do not match the window count".into(),
        ));
    }
    let mut out = ArrayDir::create(dir)?;
    for (i, w) in windows.iter().enumerate() {
        out.write(&window_name(i), w.data())?;
    }
    let meta = out.metadata_mut();
    meta.insert("kind".into(), FEATURE_KIND.into());
    meta.insert("feature_dim".into(), d.into());
    meta.insert("windows".into(), windows.len().into());
    meta.insert("encoder".into(), encoder.into());
    if let Some(b) = bounds {
        meta.insert(
            "window_bounds".into(),
            serde_json::to_value(b).expect("bounds serialize"),
        );
    }
    out.save()
}

fn declared_dim(dir: &ArrayDir) -> Result<usize, IoError> {
    match dir.metadata().get("feature_dim") {
        Some(Value::Number(n)) => n
            .as_u64()
            .filter(|&d| d > 0)
            .map(|d| d as usize)
            .ok_or_else(|| IoError::Schema(format!("feature_dim {n} is not a positive integer"))),
        _ => Err(IoError::Schema(
            "feature manifest does not declare feature_dim".into(),
        )),
    }
}

fn read_window(dir: &ArrayDir, name: &str, d: usize) -> Result<FeatureSequence, IoError> {
    let e = dir.entry(name)?;
    if e.shape.len() != 2 || e.shape[1] != d {
        return Err(IoError::Schema(format!(
            "feature array '{name}' has shape {:?}, expected [L, {d}]",
            e.shape
        )));
    }
    let data = dir.read_dim::<f32, Ix2>(name)?;
    Ok(FeatureSequence::new(data, FeatureSource::FileBacked)?)
}

/// One `[L, d]` feature array from a feature directory.
pub fn load_features(dir: &Path, name: &str) -> Result<FeatureSequence, IoError> {
    let d = ArrayDir::open(dir)?;
    let dim = declared_dim(&d)?;
    read_window(&d, name, dim)
}

/// All windows of a feature directory, in window order.
pub fn load_feature_windows(dir: &Path) -> Result<Vec<FeatureSequence>, IoError> {
    let d = ArrayDir::open(dir)?;
    let dim = declared_dim(&d)?;
    let count = d.names().filter(|n| n.starts_with("window_")).count();
    if count == 0 {
        return Err(IoError::Schema(format!(
            "{} holds no feature windows",
            dir.display()
        )));
    }
    (0..count)
        .map(|i| read_window(&d, &window_name(i), dim))
        .collect()
}
