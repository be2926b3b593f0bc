//! Dataset layout.
//!
//! ```text
//! D/manifest.json        metadata (grid, rates, splits, ...) + traj_coords, traj_dcf
//! D/<id>/manifest.json   kspace, norm_scale, features, references, masks, maps,
//!                        eba, timestamps, params
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, Array4, Axis, Ix1, Ix2, Ix3, Ix4};
use num_complex::{Complex32, Complex64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sirem_core::coil::{KSpaceFrame, SensitivityMaps};
use sirem_core::fusion::{EbAMap, EbaProvenance, DEFAULT_EBA_SIGMA};
use sirem_core::nufft::{GridderConfig, NufftPlan};
use sirem_core::phantom::{build_utterance, generate, PhantomConfig, CLASS_NAMES, PARAM_COUNT};
use sirem_core::train::Utterance;
use sirem_core::trajectory::{
    gen_spiral, GridSize, Trajectory, ARMS_PER_FRAME, AUDIO_SAMPLE_RATE, FRAME_RATE_FPS,
    REFERENCE_RATE_FPS,
};

use super::{ArrayDir, IoError};

pub const DATASET_KIND: &str = "sirem-dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown split '{s}' (expected train, val or test)"))
    }
}

/// Configuration of `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Template for every utterance; `seed` and `coupling_seed` are derived from `seed` below.
    pub phantom: PhantomConfig,
    pub samples_per_arm: usize,
    pub turns: f64,
    /// Utterance counts for train, val and test.
    pub split: [usize; 3],
    pub eba_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            samples_per_arm: 512,
            turns: 8.0,
            split: [10, 2, 4],
            eba_sigma: DEFAULT_EBA_SIGMA,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn utterances(&self) -> usize {
        self.split.iter().sum()
    }

    pub fn trajectory(&self) -> Result<Trajectory, IoError> {
        Ok(gen_spiral(
            ARMS_PER_FRAME,
            self.samples_per_arm,
            self.turns,
            self.phantom.grid,
        )?)
    }

    fn utterance_config(&self, index: usize) -> PhantomConfig {
        PhantomConfig {
            seed: splitmix64(self.seed.wrapping_add(index as u64 + 1)),
            coupling_seed: splitmix64(self.seed ^ 0xc0c0_c0c0_c0c0_c0c0),
            ..self.phantom.clone()
        }
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub id: String,
    pub split: Split,
    pub seed: u64,
}

/// Typed view of the dataset-level metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub grid: GridSize,
    pub frames: usize,
    pub coils: usize,
    pub arms: usize,
    pub samples_per_arm: usize,
    pub feature_dim: usize,
    pub feature_steps: usize,
    pub class_names: Vec<String>,
    pub frame_rate_fps: f64,
    pub reference_rate_fps: f64,
    pub sample_rate: u32,
    pub utterances: Vec<UtteranceMeta>,
}

fn to_c32(z: &Complex64) -> Complex32 {
    Complex32::new(z.re as f32, z.im as f32)
}

/// Generates and writes a phantom dataset. Utterances are simulated in parallel
/// and written in index order, so the output is byte-identical for a given config.
pub fn make_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Dataset, IoError> {
    cfg.phantom.validate()?;
    if cfg.utterances() == 0 {
        return Err(IoError::Schema(
            "dataset needs at least one utterance".into(),
        ));
    }
    let traj = cfg.trajectory()?;
    let plan = NufftPlan::new(&traj, &GridderConfig::default())?;
    let splits: Vec<Split> = Split::ALL
        .iter()
        .zip(cfg.split)
        .flat_map(|(s, n)| std::iter::repeat_n(*s, n))
        .collect();
    let metas: Vec<UtteranceMeta> = splits
        .iter()
        .enumerate()
        .map(|(i, s)| UtteranceMeta {
            id: format!("utt{i:02}"),
            split: *s,
            seed: cfg.utterance_config(i).seed,
        })
        .collect();
    let mut seeds: Vec<u64> = metas.iter().map(|m| m.seed).collect();
    seeds.sort_unstable();
    if seeds.windows(2).any(|w| w[0] == w[1]) {
        return Err(IoError::Schema("derived utterance seeds collide".into()));
    }

    let mut root = ArrayDir::create(out)?;
    root.write("traj_coords", traj.coords())?;
    root.write("traj_dcf", traj.dcf())?;
    let meta = DatasetMeta {
        kind: DATASET_KIND.into(),
        grid: cfg.phantom.grid,
        frames: cfg.phantom.frames,
        coils: cfg.phantom.coils,
        arms: ARMS_PER_FRAME,
        samples_per_arm: cfg.samples_per_arm,
        feature_dim: cfg.phantom.feature_dim,
        feature_steps: cfg.phantom.feature_steps,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        frame_rate_fps: FRAME_RATE_FPS,
        reference_rate_fps: REFERENCE_RATE_FPS,
        sample_rate: AUDIO_SAMPLE_RATE,
        utterances: metas.clone(),
    };
    let Value::Object(map) = serde_json::to_value(&meta).expect("metadata serializes") else {
        unreachable!("struct serializes to an object")
    };
    *root.metadata_mut() = map;
    root.metadata_mut().insert(
        "config".into(),
        serde_json::to_value(cfg).expect("config serializes"),
    );

    // Bounded parallelism keeps peak memory at a few utterances.
    for chunk in metas.chunks(rayon::current_num_threads().max(1)) {
        let built: Vec<_> = chunk
            .par_iter()
            .map(|m| {
                let index: usize = m.id[3..].parse().expect("generated id");
                let pc = cfg.utterance_config(index);
                let seq = generate(&pc)?;
                let utt = build_utterance(&m.id, &seq, &pc, &plan, cfg.eba_sigma)?;
                Ok::<_, sirem_core::Error>((seq, utt))
            })
            .collect::<Result<_, _>>()?;
        for (m, (seq, utt)) in chunk.iter().zip(built) {
            let mut d = ArrayDir::create(out.join(&m.id))?;
            let t = utt.frames();
            let (c, r, n) = utt.kspace[0].data().dim();
            let mut k = Array4::<Complex32>::zeros((t, c, r, n));
            for (i, f) in utt.kspace.iter().enumerate() {
                k.index_axis_mut(Axis(0), i).assign(&f.data().map(to_c32));
            }
            d.write("kspace", &k)?;
            d.write(
                "norm_scale",
                &Array1::from_iter(utt.kspace.iter().map(|f| f.norm_scale())),
            )?;
            d.write("features", &seq.features)?;
            d.write("references", &seq.frames.mapv(|v| v as f32))?;
            d.write("masks", &seq.masks)?;
            d.write("maps", &utt.maps.maps().map(to_c32))?;
            d.write("eba", &utt.eba.weights().mapv(|v| v as f32))?;
            d.write("timestamps", &Array1::from_vec(seq.timestamps.clone()))?;
            d.write("params", &seq.params)?;
            d.metadata_mut().insert("id".into(), m.id.clone().into());
            d.metadata_mut()
                .insert("split".into(), m.split.as_str().into());
            d.metadata_mut().insert("seed".into(), m.seed.into());
            d.save()?;
        }
    }
    root.save()?;
    load_dataset(out)
}

#[derive(Debug, Clone)]
pub struct UtteranceHandle {
    pub id: String,
    pub split: Split,
    dir: ArrayDir,
}

impl UtteranceHandle {
    pub fn path(&self) -> &Path {
        self.dir.path()
    }
}

/// A validated dataset; utterance payloads are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    pub meta: DatasetMeta,
    trajectory: Trajectory,
    utterances: Vec<UtteranceHandle>,
}

struct Expect<'a> {
    name: &'a str,
    dtype: &'a str,
    axes: Vec<(&'a str, usize)>,
}

fn check_arrays(id: &str, dir: &ArrayDir, expected: &[Expect<'_>], problems: &mut Vec<String>) {
    for e in expected {
        let Ok(entry) = dir.entry(e.name) else {
            problems.push(format!("{id}: missing array '{}'", e.name));
            continue;
        };
        if entry.dtype != e.dtype {
            problems.push(format!(
                "{id}: array '{}' is {}, expected {}",
                e.name, entry.dtype, e.dtype
            ));
        }
        if entry.shape.len() != e.axes.len() {
            problems.push(format!(
                "{id}: array '{}' has rank {}, expected {} ({})",
                e.name,
                entry.shape.len(),
                e.axes.len(),
                e.axes.iter().map(|a| a.0).collect::<Vec<_>>().join(", ")
            ));
            continue;
        }
        for (axis, (&got, (label, want))) in entry.shape.iter().zip(&e.axes).enumerate() {
            if got != *want {
                problems.push(format!(
                    "{id}: array '{}' axis {axis} ({label}) is {got}, expected {want}",
                    e.name
                ));
            }
        }
    }
}

/// Opens a dataset and validates every manifest and array shape before returning.
pub fn load_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let root = ArrayDir::open(dir)?;
    let meta: DatasetMeta = serde_json::from_value(Value::Object(root.metadata().clone()))
        .map_err(|e| IoError::Schema(format!("dataset metadata: {e}")))?;
    let mut problems = Vec::new();
    if meta.kind != DATASET_KIND {
        problems.push(format!(
            "metadata kind is '{}', expected '{DATASET_KIND}'",
            meta.kind
        ));
    }
    if meta.arms != ARMS_PER_FRAME {
        problems.push(format!(
            "metadata declares {} arms, expected {ARMS_PER_FRAME}",
            meta.arms
        ));
    }
    let (h, w) = meta.grid.dim();
    let n = meta.samples_per_arm;
    check_arrays(
        "dataset",
        &root,
        &[
            Expect {
                name: "traj_coords",
                dtype: "f64",
                axes: vec![("arms", ARMS_PER_FRAME), ("samples", n), ("xy", 2)],
            },
            Expect {
                name: "traj_dcf",
                dtype: "f64",
                axes: vec![("arms", ARMS_PER_FRAME), ("samples", n)],
            },
        ],
        &mut problems,
    );
    let mut ids: Vec<&str> = meta.utterances.iter().map(|u| u.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|p| p[0] == p[1]) {
        problems.push("utterance ids are not unique".into());
    }

    let t = meta.frames;
    let (c, l, d, k) = (
        meta.coils,
        meta.feature_steps,
        meta.feature_dim,
        meta.class_names.len(),
    );
    let expected = [
        Expect {
            name: "kspace",
            dtype: "c64",
            axes: vec![
                ("frames", t),
                ("coils", c),
                ("arms", ARMS_PER_FRAME),
                ("samples", n),
            ],
        },
        Expect {
            name: "norm_scale",
            dtype: "f64",
            axes: vec![("frames", t)],
        },
        Expect {
            name: "features",
            dtype: "f32",
            axes: vec![("frames", t), ("steps", l), ("feature_dim", d)],
        },
        Expect {
            name: "references",
            dtype: "f32",
            axes: vec![("frames", t), ("height", h), ("width", w)],
        },
        Expect {
            name: "masks",
            dtype: "u8",
            axes: vec![("frames", t), ("classes", k), ("height", h), ("width", w)],
        },
        Expect {
            name: "maps",
            dtype: "c64",
            axes: vec![("coils", c), ("height", h), ("width", w)],
        },
        Expect {
            name: "eba",
            dtype: "f32",
            axes: vec![("height", h), ("width", w)],
        },
        Expect {
            name: "timestamps",
            dtype: "f64",
            axes: vec![("frames", t)],
        },
        Expect {
            name: "params",
            dtype: "f64",
            axes: vec![("frames", t), ("params", PARAM_COUNT)],
        },
    ];
    let mut utterances = Vec::new();
    for u in &meta.utterances {
        match ArrayDir::open(dir.join(&u.id)) {
            Ok(ud) => {
                check_arrays(&u.id, &ud, &expected, &mut problems);
                utterances.push(UtteranceHandle {
                    id: u.id.clone(),
                    split: u.split,
                    dir: ud,
                });
            }
            Err(e) => problems.push(format!("{}: {e}", u.id)),
        }
    }
    if !problems.is_empty() {
        return Err(IoError::Schema(problems.join("; ")));
    }
    let trajectory = Trajectory::new(
        root.read_dim::<f64, Ix3>("traj_coords")?,
        root.read_dim::<f64, Ix2>("traj_dcf")?,
        meta.grid,
    )?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        meta,
        trajectory,
        utterances,
    })
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn grid(&self) -> GridSize {
        self.meta.grid
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn plan(&self) -> Result<NufftPlan, IoError> {
        Ok(NufftPlan::new(&self.trajectory, &GridderConfig::default())?)
    }

    pub fn utterances(&self) -> &[UtteranceHandle] {
        &self.utterances
    }

    /// Utterances of one split, or all of them.
    pub fn select(&self, split: Option<Split>) -> Vec<&UtteranceHandle> {
        self.utterances
            .iter()
            .filter(|u| split.is_none_or(|s| u.split == s))
            .collect()
    }

    pub fn handle(&self, id: &str) -> Option<&UtteranceHandle> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn references(&self, u: &UtteranceHandle) -> Result<Array3<f64>, IoError> {
        Ok(u.dir.read_dim::<f32, Ix3>("references")?.mapv(f64::from))
    }

    pub fn masks(&self, u: &UtteranceHandle) -> Result<Array4<u8>, IoError> {
        u.dir.read_dim::<u8, Ix4>("masks")
    }

    pub fn timestamps(&self, u: &UtteranceHandle) -> Result<Array1<f64>, IoError> {
        u.dir.read_dim::<f64, Ix1>("timestamps")
    }

    /// Raw `[T, L, d]` features as stored.
    pub fn features(&self, u: &UtteranceHandle) -> Result<Array3<f32>, IoError> {
        u.dir.read_dim::<f32, Ix3>("features")
    }

    pub fn kspace(&self, u: &UtteranceHandle) -> Result<Vec<KSpaceFrame>, IoError> {
        let k = u.dir.read_dim::<Complex32, Ix4>("kspace")?;
        let scale = u.dir.read_dim::<f64, Ix1>("norm_scale")?;
        k.outer_iter()
            .zip(scale.iter())
            .map(|(f, &s)| {
                let mut data = f.map(|z| Complex64::new(z.re as f64, z.im as f64));
                // Rounding to f32 can push a unit-magnitude sample a hair above 1.
                let max = data.iter().map(|z| z.norm()).fold(0.0, f64::max);
                let mut scale = s;
                if max > 1.0 {
                    data.mapv_inplace(|z| z / max);
                    scale *= max;
                }
                Ok(KSpaceFrame::from_normalized(data, scale)?)
            })
            .collect()
    }

    pub fn maps(&self, u: &UtteranceHandle) -> Result<SensitivityMaps, IoError> {
        let m = u.dir.read_dim::<Complex32, Ix3>("maps")?;
        Ok(SensitivityMaps::from_normalized(
            m.map(|z| Complex64::new(z.re as f64, z.im as f64)),
        )?)
    }

    pub fn eba(&self, u: &UtteranceHandle) -> Result<EbAMap, IoError> {
        let w: Array2<f64> = u.dir.read_dim::<f32, Ix2>("eba")?.mapv(f64::from);
        Ok(EbAMap::new(w, EbaProvenance::Loaded)?)
    }

    /// Everything training and reconstruction need for one utterance.
    pub fn load(&self, u: &UtteranceHandle) -> Result<Utterance, IoError> {
        Ok(Utterance {
            id: u.id.clone(),
            kspace: self.kspace(u)?,
            features: sirem_core::phantom::pooled_features(&self.features(u)?)?,
            references: self.references(u)?,
            maps: self.maps(u)?,
            eba: self.eba(u)?,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Utterance>, IoError> {
        self.select(Some(split))
            .into_iter()
            .map(|u| self.load(u))
            .collect()
    }
}
