//! `sirem` command line: simulate, train, recon, eval, bench.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array3, Axis, Ix3};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use sirem_core::audio::{pool, PooledFeature};
use sirem_core::baselines::{recon_gridding, CSConfig, CsMethod};
use sirem_core::coil::{KSpaceFrame, SensitivityMaps};
use sirem_core::fusion::{EbAMap, Method, ReconFrame};
use sirem_core::metrics::{
    frame_metrics, time_per_item, MetricMeans, MetricReport, SequenceReport, TimingStats,
};
use sirem_core::nufft::NufftPlan;
use sirem_core::train::{train_loop, SiremModel, TrainConfig, TrainOutcome};

use crate::io::{
    load_dataset, load_feature_windows, load_model, make_dataset, prepare_output_dir,
    prepare_output_file, read_json, save_model, write_csv, write_json, write_png, ArrayDir,
    Dataset, DatasetConfig, IoError, Split, UtteranceHandle,
};

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "SIREM_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "sirem",
    version,
    about = "Speech-informed spiral MRI reconstruction"
)]
pub struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset.
    Simulate(SimulateArgs),
    /// Train the decoder and arm profile.
    Train(TrainArgs),
    /// Reconstruct frames with one method.
    Recon(ReconArgs),
    /// Compare reconstructions against reference frames.
    Eval(EvalArgs),
    /// Time and score several methods.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Master seed for every stochastic component.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace existing output.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Dataset configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Pin the arm profile to ones.
    #[arg(long)]
    pub freeze_arms: bool,
    /// Train the audio ablation (zero features).
    #[arg(long)]
    pub zero_features: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Clone)]
pub struct Selection {
    /// Split to process: train, val or test. All utterances when omitted.
    #[arg(long)]
    pub split: Option<Split>,
    /// Keep only these arms, e.g. `0,7`; all 13 when omitted.
    #[arg(long, value_delimiter = ',')]
    pub arms: Option<Vec<usize>>,
    /// Use at most this many frames per utterance.
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub method: Method,
    /// Model bundle, required for the learned methods.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Feature directories per utterance (`<dir>/<utterance id>`) replacing the dataset's features.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Compressed-sensing configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Regularization weight for the compressed-sensing methods.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Write per-iteration objective traces for the compressed-sensing methods.
    #[arg(long)]
    pub trace: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub select: Selection,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reconstruction directory (or a dataset, whose references are then compared).
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "gridding,wavelet,tv,sirem"
    )]
    pub methods: Vec<Method>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Timed passes over every frame, after one warm-up call.
    #[arg(long, default_value_t = 2)]
    pub reps: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub select: Selection,
    #[command(flatten)]
    pub common: Common,
}

/// Failure classes, mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Exists(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<sirem_core::Error> for CliError {
    fn from(e: sirem_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("sirem: error: {}", e.message().replace('\n', " "));
            e.code()
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        // A pool may already exist when called repeatedly in one process; the first one wins.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Recon(a) => recon(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    }
}

fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => read_json(p).map_err(|e| CliError::Usage(format!("config: {e}"))),
    }
}

fn config_hash(config: &Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

fn write_provenance(
    path: &Path,
    command: &str,
    seed: Option<u64>,
    config: Value,
    wall_time_s: f64,
) -> CliResult<()> {
    let record = json!({
        "tool": "sirem",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "config_hash": config_hash(&config),
        "config": config,
        "wall_time_s": wall_time_s,
    });
    Ok(write_json(path, &record)?)
}

fn provenance_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    file.with_file_name(name)
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let t0 = Instant::now();
    let mut cfg: DatasetConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    cfg.phantom
        .validate()
        .map_err(|e| CliError::Usage(format!("config: {e}")))?;
    prepare_output_dir(&a.out, a.common.overwrite)?;
    make_dataset(&cfg, &a.out)?;
    let config = serde_json::to_value(&cfg).expect("config serializes");
    write_provenance(
        &a.out.join("provenance.json"),
        "simulate",
        Some(cfg.seed),
        config,
        t0.elapsed().as_secs_f64(),
    )
}

fn train(a: TrainArgs) -> CliResult<()> {
    let t0 = Instant::now();
    let mut cfg: TrainConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.freeze_arms |= a.freeze_arms;
    cfg.zero_features |= a.zero_features;
    cfg.validate()
        .map_err(|e| CliError::Usage(format!("config: {e}")))?;
    let data = load_dataset(&a.data)?;
    prepare_output_dir(&a.out, a.common.overwrite)?;
    let plan = data.plan()?;
    let train = data.load_split(Split::Train)?;
    let val = data.load_split(Split::Val)?;
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Data(
            "dataset needs nonempty train and val splits".into(),
        ));
    }
    let model = SiremModel::init(data.meta.feature_dim, data.grid(), &cfg)?;
    let outcome = train_loop(model, &train, &val, &plan, &cfg)?;
    save_model(
        &a.out,
        &outcome.model,
        &cfg,
        outcome.best_val_psnr,
        outcome.best_epoch,
    )?;
    write_train_log(&a.out.join("train_log.csv"), &outcome)?;
    let config = serde_json::to_value(&cfg).expect("config serializes");
    write_provenance(
        &a.out.join("provenance.json"),
        "train",
        Some(cfg.seed),
        config,
        t0.elapsed().as_secs_f64(),
    )
}

fn write_train_log(path: &Path, outcome: &TrainOutcome) -> CliResult<()> {
    let rows: Vec<Vec<String>> = outcome
        .log
        .iter()
        .map(|l| {
            vec![
                l.epoch.to_string(),
                l.loss.total.to_string(),
                l.loss.recon.to_string(),
                l.loss.psf.to_string(),
                l.loss.budget.to_string(),
                l.loss.mask.to_string(),
                l.lr.to_string(),
                l.val_psnr.map(|v| v.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    let header = [
        "epoch", "loss", "recon", "psf", "budget", "mask", "lr", "val_psnr",
    ];
    Ok(write_csv(path, &header, &rows)?)
}

/// Everything one method needs to reconstruct frames of a dataset.
struct Reconstructor {
    method: Method,
    plan: NufftPlan,
    cs: CSConfig,
    model: Option<SiremModel>,
}

/// One utterance prepared for reconstruction.
struct Prepared {
    id: String,
    frames: Vec<KSpaceFrame>,
    features: Vec<PooledFeature>,
    references: Array3<f64>,
    maps: SensitivityMaps,
    eba: EbAMap,
}

struct FrameOutput {
    recon: ReconFrame,
    trace: Vec<f64>,
}

impl Reconstructor {
    fn new(
        method: Method,
        data: &Dataset,
        model_dir: Option<&Path>,
        cs_config: Option<&Path>,
        lambda: Option<f64>,
    ) -> CliResult<Self> {
        let learned = matches!(method, Method::Sirem | Method::SiremNoAudio);
        let model = match (learned, model_dir) {
            (true, None) => {
                return Err(CliError::Usage(format!(
                    "--method {method} requires --model"
                )))
            }
            (true, Some(dir)) => {
                let (mut m, _) = load_model(dir)?;
                if m.feature_dim() != data.meta.feature_dim {
                    return Err(CliError::Data(format!(
                        "dimension mismatch: model expects {}-dimensional features, dataset has {}",
                        m.feature_dim(),
                        data.meta.feature_dim
                    )));
                }
                if method == Method::SiremNoAudio {
                    m.zero_features = true;
                }
                Some(m)
            }
            (false, _) => None,
        };
        let mut cs: CSConfig = match cs_config {
            Some(p) => read_json(p).map_err(|e| CliError::Usage(format!("config: {e}")))?,
            None if method == Method::Tv => CSConfig::tv_default(),
            None => CSConfig::wavelet_default(),
        };
        if let Some(l) = lambda {
            cs.lambda = l;
        }
        cs.validate()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        Ok(Self {
            method,
            plan: data.plan()?,
            cs,
            model,
        })
    }

    fn frame(&self, u: &Prepared, t: usize, trace: bool) -> sirem_core::Result<FrameOutput> {
        let k = &u.frames[t];
        let cs = |m: CsMethod| -> sirem_core::Result<FrameOutput> {
            let cfg = CSConfig {
                trace,
                ..self.cs.clone()
            };
            let out = m.run(k, &self.plan, &u.maps, &cfg)?;
            Ok(FrameOutput {
                recon: out.frame,
                trace: out.objective,
            })
        };
        let mut out = match self.method {
            Method::Gridding => FrameOutput {
                recon: recon_gridding(k, &self.plan, &u.maps)?,
                trace: Vec::new(),
            },
            Method::Wavelet => cs(CsMethod::Wavelet)?,
            Method::Tv => cs(CsMethod::Tv)?,
            Method::Sirem | Method::SiremNoAudio => {
                let m = self.model.as_ref().expect("learned methods carry a model");
                FrameOutput {
                    recon: m.reconstruct(k, &self.plan, &u.maps, &u.features[t], &u.eba)?,
                    trace: Vec::new(),
                }
            }
        };
        out.recon.frame_id = t;
        Ok(out)
    }
}

fn prepare(
    data: &Dataset,
    h: &UtteranceHandle,
    select: &Selection,
    features: Option<&Path>,
) -> CliResult<Prepared> {
    let utt = data.load(h)?;
    let limit = select.frames.unwrap_or(usize::MAX).min(utt.frames());
    if limit == 0 {
        return Err(CliError::Usage("--frames must be positive".into()));
    }
    let mut frames = utt.kspace;
    frames.truncate(limit);
    if let Some(arms) = &select.arms {
        frames = frames
            .iter()
            .map(|f| f.retain_arms(arms))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Usage(format!("--arms: {e}")))?;
    }
    let mut pooled = utt.features;
    if let Some(root) = features {
        let windows = load_feature_windows(&root.join(&h.id))?;
        if windows.len() < limit {
            return Err(CliError::Data(format!(
                "{}: {} feature windows for {limit} frames",
                h.id,
                windows.len()
            )));
        }
        pooled = windows.iter().map(pool).collect();
        if let Some(w) = windows.iter().find(|w| w.dim() != data.meta.feature_dim) {
            return Err(CliError::Data(format!(
                "{}: feature files have d = {}, dataset and model use {}",
                h.id,
                w.dim(),
                data.meta.feature_dim
            )));
        }
    }
    pooled.truncate(limit);
    let references = utt
        .references
        .slice_axis(Axis(0), (0..limit).into())
        .to_owned();
    Ok(Prepared {
        id: h.id.clone(),
        frames,
        features: pooled,
        references,
        maps: utt.maps,
        eba: utt.eba,
    })
}

fn selection_json(s: &Selection) -> Value {
    json!({ "split": s.split.map(|x| x.as_str()), "arms": s.arms, "frames": s.frames })
}

fn recon(a: ReconArgs) -> CliResult<()> {
    let t0 = Instant::now();
    let data = load_dataset(&a.data)?;
    let rec = Reconstructor::new(
        a.method,
        &data,
        a.model.as_deref(),
        a.config.as_deref(),
        a.lambda,
    )?;
    let handles = data.select(a.select.split);
    if handles.is_empty() {
        return Err(CliError::Data("no utterances selected".into()));
    }
    let prepared: Vec<Prepared> = handles
        .iter()
        .map(|h| prepare(&data, h, &a.select, a.features.as_deref()))
        .collect::<CliResult<_>>()?;
    prepare_output_dir(&a.out, a.common.overwrite)?;
    let mut timings = serde_json::Map::new();
    for u in &prepared {
        let results: Vec<(FrameOutput, f64)> = (0..u.frames.len())
            .into_par_iter()
            .map(|t| {
                let s = Instant::now();
                let out = rec.frame(u, t, a.trace)?;
                Ok((out, s.elapsed().as_secs_f64() * 1e3))
            })
            .collect::<sirem_core::Result<_>>()?;
        let (h, w) = data.grid().dim();
        let mut stack = Array3::<f32>::zeros((results.len(), h, w));
        let dir = a.out.join(&u.id);
        let mut out = ArrayDir::create(&dir)?;
        for (t, (r, _)) in results.iter().enumerate() {
            stack
                .index_axis_mut(Axis(0), t)
                .assign(&r.recon.image.mapv(|v| v as f32));
            write_png(&dir.join(format!("frame_{t:04}.png")), &r.recon.image)?;
        }
        out.write("recon", &stack)?;
        out.metadata_mut()
            .insert("kind".into(), "sirem-recon".into());
        out.metadata_mut()
            .insert("method".into(), a.method.as_str().into());
        out.metadata_mut()
            .insert("utterance".into(), u.id.clone().into());
        out.save()?;
        if a.trace && matches!(a.method, Method::Wavelet | Method::Tv) {
            let rows: Vec<Vec<String>> = results
                .iter()
                .enumerate()
                .flat_map(|(t, (r, _))| {
                    r.trace
                        .iter()
                        .enumerate()
                        .map(move |(i, v)| vec![t.to_string(), i.to_string(), v.to_string()])
                })
                .collect();
            write_csv(
                &dir.join("objective.csv"),
                &["frame", "iteration", "objective"],
                &rows,
            )?;
        }
        let ms: Vec<f64> = results.iter().map(|r| r.1).collect();
        timings.insert(
            u.id.clone(),
            serde_json::to_value(TimingStats::from_samples(&ms)).expect("timing serializes"),
        );
    }
    let config = json!({
        "method": a.method.as_str(),
        "data": a.data,
        "model": a.model,
        "features": a.features,
        "cs": rec.cs,
        "selection": selection_json(&a.select),
    });
    let prov = a.out.join("provenance.json");
    write_provenance(
        &prov,
        "recon",
        a.common.seed,
        config,
        t0.elapsed().as_secs_f64(),
    )?;
    // Timing is appended as a wall-time field next to the provenance record.
    let mut record: Value = read_json(&prov)?;
    record["frame_ms"] = Value::Object(timings);
    Ok(write_json(&prov, &record)?)
}

/// Predictions of one utterance: a recon directory's `recon` array, or a dataset's `references`.
fn read_predictions(pred_root: &Path, id: &str) -> CliResult<Option<(Array3<f64>, String)>> {
    let dir = pred_root.join(id);
    if !dir.join(crate::io::MANIFEST_FILE).exists() {
        return Ok(None);
    }
    let d = ArrayDir::open(&dir)?;
    let label = d
        .metadata()
        .get("method")
        .and_then(Value::as_str)
        .unwrap_or("reference")
        .to_string();
    let name = if d.entry("recon").is_ok() {
        "recon"
    } else {
        "references"
    };
    Ok(Some((d.read_dim::<f32, Ix3>(name)?.mapv(f64::from), label)))
}

fn metric_rows(label: &str, report: &MetricReport, timing: bool) -> Vec<Vec<String>> {
    let fmt = |v: Option<f64>| {
        v.map(|x| x.to_string())
            .unwrap_or_else(|| "undefined".into())
    };
    let rows_for = |seq: &str, m: &MetricMeans, t: Option<TimingStats>| -> Vec<Vec<String>> {
        let metrics = [
            ("psnr", Some(m.psnr)),
            ("mse", Some(m.mse)),
            ("nmse", m.nmse),
            ("nrmse", Some(m.nrmse)),
            ("ssim", Some(m.ssim)),
            ("hfen", m.hfen),
        ];
        metrics
            .iter()
            .map(|(name, v)| {
                let mut row = vec![
                    seq.to_string(),
                    label.to_string(),
                    name.to_string(),
                    fmt(*v),
                ];
                if timing {
                    match t {
                        Some(t) => row.extend([
                            t.mean_ms.to_string(),
                            t.std_ms.to_string(),
                            t.fps().to_string(),
                            t.realtime().to_string(),
                        ]),
                        None => row.extend(std::iter::repeat_n(String::new(), 4)),
                    }
                }
                row
            })
            .collect()
    };
    let mut rows: Vec<Vec<String>> = report
        .sequences
        .iter()
        .flat_map(|s| rows_for(&s.sequence, &s.means, s.timing))
        .collect();
    rows.extend(rows_for("aggregate", &report.aggregate, report.timing));
    rows
}

const METRIC_HEADER: [&str; 4] = ["sequence", "method", "metric", "value"];
const BENCH_HEADER: [&str; 8] = [
    "sequence",
    "method",
    "metric",
    "value",
    "ms_per_frame_mean",
    "ms_per_frame_std",
    "fps",
    "realtime",
];

fn eval(a: EvalArgs) -> CliResult<()> {
    let t0 = Instant::now();
    let data = load_dataset(&a.reference)?;
    prepare_output_file(&a.out, a.overwrite)?;
    let mut sequences = Vec::new();
    let mut label = None;
    for h in data.utterances() {
        let Some((pred, l)) = read_predictions(&a.pred, &h.id)? else {
            continue;
        };
        let reference = data.references(h)?;
        let t = pred.dim().0;
        if t > reference.dim().0
            || pred.dim().1 != reference.dim().1
            || pred.dim().2 != reference.dim().2
        {
            return Err(CliError::Data(format!(
                "{}: prediction shape {:?} does not fit reference shape {:?}",
                h.id,
                pred.dim(),
                reference.dim()
            )));
        }
        let frames = (0..t)
            .map(|i| {
                frame_metrics(
                    pred.index_axis(Axis(0), i),
                    reference.index_axis(Axis(0), i),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        sequences.push(SequenceReport::new(h.id.clone(), frames, None)?);
        label.get_or_insert(l);
    }
    if sequences.is_empty() {
        return Err(CliError::Data(format!(
            "{} holds no predictions for {}",
            a.pred.display(),
            a.reference.display()
        )));
    }
    let label = label.expect("at least one sequence");
    let report = MetricReport::new(Method::Gridding, sequences)?;
    write_csv(&a.out, &METRIC_HEADER, &metric_rows(&label, &report, false))?;
    let config = json!({ "pred": a.pred, "ref": a.reference });
    write_provenance(
        &provenance_beside(&a.out),
        "eval",
        None,
        config,
        t0.elapsed().as_secs_f64(),
    )
}

/// Times and scores one method over prepared utterances.
pub fn bench_method(
    rec: &ReconstructorHandle,
    utterances: &[PreparedHandle],
    reps: usize,
) -> sirem_core::Result<MetricReport> {
    let mut sequences = Vec::new();
    for u in utterances {
        let frames: Vec<usize> = (0..u.0.frames.len()).collect();
        let (outs, ms) = time_per_item(&frames, reps, |&t| rec.0.frame(&u.0, t, false))?;
        let metrics = outs
            .iter()
            .enumerate()
            .map(|(t, o)| {
                frame_metrics(o.recon.image.view(), u.0.references.index_axis(Axis(0), t))
            })
            .collect::<Result<Vec<_>, _>>()?;
        sequences.push(SequenceReport::new(
            u.0.id.clone(),
            metrics,
            TimingStats::from_samples(&ms),
        )?);
    }
    MetricReport::new(rec.0.method, sequences)
}

/// Opaque handle so library users and tests can drive the benchmark.
pub struct ReconstructorHandle(Reconstructor);
/// Opaque handle to an utterance prepared for reconstruction.
pub struct PreparedHandle(Prepared);

impl ReconstructorHandle {
    pub fn new(
        method: Method,
        data: &Dataset,
        model: Option<&Path>,
        lambda: Option<f64>,
    ) -> Result<Self, String> {
        Reconstructor::new(method, data, model, None, lambda)
            .map(Self)
            .map_err(|e| e.message().to_string())
    }

    /// Reconstructs frame `t` of `u`.
    pub fn reconstruct(&self, u: &PreparedHandle, t: usize) -> sirem_core::Result<ReconFrame> {
        self.0.frame(&u.0, t, false).map(|o| o.recon)
    }
}

impl PreparedHandle {
    pub fn new(
        data: &Dataset,
        h: &UtteranceHandle,
        arms: Option<Vec<usize>>,
        frames: Option<usize>,
    ) -> Result<Self, String> {
        let s = Selection {
            split: None,
            arms,
            frames,
        };
        prepare(data, h, &s, None)
            .map(Self)
            .map_err(|e| e.message().to_string())
    }

    pub fn references(&self) -> &Array3<f64> {
        &self.0.references
    }

    pub fn frames(&self) -> usize {
        self.0.frames.len()
    }
}

#[derive(Serialize)]
struct BenchSummary {
    method: String,
    ms_per_frame_mean: f64,
    ms_per_frame_std: f64,
    realtime: bool,
}

fn bench(a: BenchArgs) -> CliResult<()> {
    let t0 = Instant::now();
    if a.reps == 0 {
        return Err(CliError::Usage("--reps must be positive".into()));
    }
    let data = load_dataset(&a.data)?;
    let recs: Vec<Reconstructor> = a
        .methods
        .iter()
        .map(|&m| Reconstructor::new(m, &data, a.model.as_deref(), a.config.as_deref(), a.lambda))
        .collect::<CliResult<_>>()?;
    prepare_output_file(&a.out, a.common.overwrite)?;
    let select = Selection {
        split: a.select.split.or(Some(Split::Test)),
        ..a.select.clone()
    };
    let prepared: Vec<PreparedHandle> = data
        .select(select.split)
        .iter()
        .map(|h| prepare(&data, h, &select, None).map(PreparedHandle))
        .collect::<CliResult<_>>()?;
    if prepared.is_empty() {
        return Err(CliError::Data("no utterances selected".into()));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for rec in recs {
        let handle = ReconstructorHandle(rec);
        let report = bench_method(&handle, &prepared, a.reps)?;
        rows.extend(metric_rows(handle.0.method.as_str(), &report, true));
        if let Some(t) = report.timing {
            summary.push(BenchSummary {
                method: handle.0.method.as_str().into(),
                ms_per_frame_mean: t.mean_ms,
                ms_per_frame_std: t.std_ms,
                realtime: t.realtime(),
            });
        }
    }
    write_csv(&a.out, &BENCH_HEADER, &rows)?;
    let config = json!({
        "data": a.data,
        "methods": a.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
        "model": a.model,
        "reps": a.reps,
        "selection": selection_json(&select),
        "summary": summary,
    });
    write_provenance(
        &provenance_beside(&a.out),
        "bench",
        a.common.seed,
        config,
        t0.elapsed().as_secs_f64(),
    )
}
