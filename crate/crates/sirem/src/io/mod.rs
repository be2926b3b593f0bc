//! On-disk formats: portable arrays, datasets, feature files, model bundles and media.

mod array;
mod dataset;
mod features;
mod media;
mod model;

use std::path::{Path, PathBuf};

pub use array::{ArrayDir, ArrayEntry, DType, Element, Manifest, FORMAT_VERSION, MANIFEST_FILE};
pub use dataset::{
    load_dataset, make_dataset, Dataset, DatasetConfig, Split, UtteranceHandle, UtteranceMeta,
};
pub use features::{load_feature_windows, load_features, write_feature_windows, FEATURE_KIND};
pub use media::{read_wav, write_csv, write_png};
pub use model::{load_model, save_model, ModelMeta};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {msg}")]
    Json { path: PathBuf, msg: String },
    #[error("array '{name}': expected {expected} payload bytes, found {got}")]
    SizeMismatch {
        name: String,
        expected: u64,
        got: u64,
    },
    #[error("unknown dtype '{0}'")]
    UnknownDtype(String),
    #[error("array '{name}': payload {path} is missing")]
    MissingFile { name: String, path: PathBuf },
    #[error("no array named '{0}'")]
    MissingArray(String),
    #[error("array '{name}' is {got}, expected {expected}")]
    DtypeMismatch {
        name: String,
        expected: &'static str,
        got: String,
    },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("{0} already exists; pass --overwrite to replace it")]
    Exists(PathBuf),
    #[error("unsupported media: {0}")]
    Media(String),
    #[error(transparent)]
    Core(#[from] sirem_core::Error),
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Prepares an output directory, refusing to touch a nonempty one unless `overwrite`.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<(), IoError> {
    if dir.exists() {
        let nonempty = std::fs::read_dir(dir)
            .map_err(|e| IoError::io(dir, e))?
            .next()
            .is_some();
        if nonempty && !overwrite {
            return Err(IoError::Exists(dir.to_path_buf()));
        }
        if nonempty {
            std::fs::remove_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))
}

/// Same contract as [`prepare_output_dir`] for a single file.
pub fn prepare_output_file(path: &Path, overwrite: bool) -> Result<(), IoError> {
    if path.exists() && !overwrite {
        return Err(IoError::Exists(path.to_path_buf()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| IoError::io(parent, e))?;
    }
    Ok(())
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| IoError::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::Json {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
