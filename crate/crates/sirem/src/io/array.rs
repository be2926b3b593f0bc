//! Raw little-endian arrays described by a JSON manifest.
//!
//! A directory holds `manifest.json` and one payload file per array. Payloads
//! are row-major with no header; `c64` is interleaved `f32` pairs `(re, im)`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayBase, ArrayD, Data, Dimension, IxDyn};
use num_complex::Complex32;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::IoError;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const BYTE_ORDER: &str = "little";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    C64,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::C64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::C64 => "c64",
            DType::U8 => "u8",
        }
    }

    pub fn parse(s: &str) -> Result<Self, IoError> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            "c64" => Ok(DType::C64),
            "u8" => Ok(DType::U8),
            other => Err(IoError::UnknownDtype(other.to_string())),
        }
    }
}

/// Scalar types with a fixed on-disk encoding.
pub trait Element: Copy + Default {
    const DTYPE: DType;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f32::from_le_bytes(b.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f64::from_le_bytes(b.try_into().expect("8 bytes"))
    }
}

impl Element for Complex32 {
    const DTYPE: DType = DType::C64;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.re.to_le_bytes());
        out.extend_from_slice(&self.im.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        Complex32::new(f32::get(&b[..4]), f32::get(&b[4..]))
    }
}

impl Element for u8 {
    const DTYPE: DType = DType::U8;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get(b: &[u8]) -> Self {
        b[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_order: String,
}

impl ArrayEntry {
    pub fn dtype(&self) -> Result<DType, IoError> {
        DType::parse(&self.dtype)
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub metadata: Map<String, Value>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            arrays: Vec::new(),
            metadata: Map::new(),
        }
    }
}

/// Every problem with a manifest and its payloads, found in one pass.
fn manifest_problems(dir: &Path, m: &Manifest) -> Vec<IoError> {
    let mut problems = Vec::new();
    if m.format_version != FORMAT_VERSION {
        problems.push(IoError::Schema(format!(
            "format_version {} is not supported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for e in &m.arrays {
        if !seen.insert(e.name.as_str()) {
            problems.push(IoError::Schema(format!(
                "array name '{}' appears twice",
                e.name
            )));
        }
        if e.byte_order != BYTE_ORDER {
            problems.push(IoError::Schema(format!(
                "array '{}' has byte_order '{}'",
                e.name, e.byte_order
            )));
        }
        let dtype = match e.dtype() {
            Ok(d) => d,
            Err(err) => {
                problems.push(err);
                continue;
            }
        };
        if e.shape.is_empty() || e.shape.contains(&0) {
            problems.push(IoError::Schema(format!(
                "array '{}' has degenerate shape {:?}",
                e.name, e.shape
            )));
            continue;
        }
        if e.file.contains(['/', '\\']) || e.file.starts_with('.') {
            problems.push(IoError::Schema(format!(
                "array '{}' points outside its directory",
                e.name
            )));
            continue;
        }
        let path = dir.join(&e.file);
        match fs::metadata(&path) {
            Err(_) => problems.push(IoError::MissingFile {
                name: e.name.clone(),
                path,
            }),
            Ok(meta) => {
                let expected = (e.len() * dtype.size()) as u64;
                if meta.len() != expected {
                    problems.push(IoError::SizeMismatch {
                        name: e.name.clone(),
                        expected,
                        got: meta.len(),
                    });
                }
            }
        }
    }
    problems
}

/// A manifest directory, validated on open; payloads are read on demand.
#[derive(Debug, Clone)]
pub struct ArrayDir {
    dir: PathBuf,
    manifest: Manifest,
}

impl ArrayDir {
    /// Starts an empty directory, creating it if needed. Existing arrays are not touched
    /// until they are overwritten by name.
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self, IoError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| IoError::io(&dir, e))?;
        Ok(Self {
            dir,
            manifest: Manifest::default(),
        })
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, IoError> {
        let dir = dir.into();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| IoError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| IoError::Json {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let mut problems = manifest_problems(&dir, &manifest);
        match problems.len() {
            0 => Ok(Self { dir, manifest }),
            1 => Err(problems.remove(0)),
            _ => Err(IoError::Schema(
                problems
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; "),
            )),
        }
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn metadata(&self) -> &Map<String, Value> {
        &self.manifest.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut Map<String, Value> {
        &mut self.manifest.metadata
    }

    pub fn entry(&self, name: &str) -> Result<&ArrayEntry, IoError> {
        self.manifest
            .arrays
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| IoError::MissingArray(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.manifest.arrays.iter().map(|e| e.name.as_str())
    }

    /// Writes the payload immediately; the manifest is written by [`ArrayDir::save`].
    pub fn write<T, S, D>(&mut self, name: &str, data: &ArrayBase<S, D>) -> Result<(), IoError>
    where
        T: Element,
        S: Data<Elem = T>,
        D: Dimension,
    {
        if name.is_empty()
            || !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        {
            return Err(IoError::Schema(format!("invalid array name '{name}'")));
        }
        if data.is_empty() {
            return Err(IoError::Schema(format!("array '{name}' is empty")));
        }
        let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.size());
        for &v in data.iter() {
            v.put(&mut bytes);
        }
        let file = format!("{name}.bin");
        let path = self.dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| IoError::io(&path, e))?;
        let entry = ArrayEntry {
            name: name.to_string(),
            dtype: T::DTYPE.as_str().to_string(),
            shape: data.shape().to_vec(),
            file,
            byte_order: BYTE_ORDER.to_string(),
        };
        match self.manifest.arrays.iter_mut().find(|e| e.name == name) {
            Some(e) => *e = entry,
            None => self.manifest.arrays.push(entry),
        }
        Ok(())
    }

    pub fn save(&self) -> Result<(), IoError> {
        let path = self.dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| IoError::io(&path, e))
    }

    pub fn read<T: Element>(&self, name: &str) -> Result<ArrayD<T>, IoError> {
        let e = self.entry(name)?;
        let dtype = e.dtype()?;
        if dtype != T::DTYPE {
            return Err(IoError::DtypeMismatch {
                name: name.to_string(),
                expected: T::DTYPE.as_str(),
                got: e.dtype.clone(),
            });
        }
        let path = self.dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| IoError::io(&path, err))?;
        let expected = (e.len() * dtype.size()) as u64;
        if bytes.len() as u64 != expected {
            return Err(IoError::SizeMismatch {
                name: name.to_string(),
                expected,
                got: bytes.len() as u64,
            });
        }
        let values: Vec<T> = bytes.chunks_exact(dtype.size()).map(T::get).collect();
        Ok(ArrayD::from_shape_vec(IxDyn(&e.shape), values).expect("size checked"))
    }

    /// Reads an array of known rank.
    pub fn read_dim<T: Element, D: Dimension>(
        &self,
        name: &str,
    ) -> Result<ndarray::Array<T, D>, IoError> {
        let a = self.read::<T>(name)?;
        let shape = a.shape().to_vec();
        a.into_dimensionality::<D>().map_err(|_| {
            IoError::Schema(format!(
                "array '{name}' has shape {shape:?}, expected rank {}",
                D::NDIM.unwrap_or(0)
            ))
        })
    }
}
