//! Joint optimization of the audio decoder and the arm logits.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{Decoder, DecoderDims, DecoderParams, Mode, ParamKind, PooledFeature};
use crate::coil::{KSpaceFrame, SensitivityMaps};
use crate::error::{Error, Result};
use crate::fusion::{fuse, mask_loss, EbAMap, Method, ReconFrame};
use crate::metrics::psnr;
use crate::nufft::NufftPlan;
use crate::policy::{
    budget_loss, budget_loss_grad, mri_backward, mri_forward, profile, psf_loss, psf_loss_grad,
    sigmoid_backward, ArmLogits, ArmProfile,
};
use crate::trajectory::{GridSize, ARMS_PER_FRAME as R};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(rename = "K")]
    pub budget_k: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub val_every: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Pin the arm profile to ones and leave the logits untouched.
    pub freeze_arms: bool,
    /// Audio ablation: the decoder only ever sees zero features.
    pub zero_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.01,
            gamma: 0.01,
            budget_k: 2.0,
            lr: 1e-4,
            weight_decay: 1e-5,
            batch: 8,
            epochs: 20,
            clip_norm: 1.0,
            val_every: 5,
            seed: 0,
            hidden: vec![1024, 2048, 2048],
            freeze_arms: false,
            zero_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha, self.beta, self.gamma, self.weight_decay];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "loss and decay weights must be finite and non-negative".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.clip_norm > 0.0 && self.budget_k > 0.0) {
            return Err(Error::InvalidArgument(
                "lr, clip_norm and K must be positive".into(),
            ));
        }
        if self.batch == 0 || self.val_every == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "batch, val_every and hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Trained decoder, arm logits and the switches that shape inference.
#[derive(Debug, Clone, PartialEq)]
pub struct SiremModel {
    pub params: DecoderParams<f32>,
    pub logits: ArmLogits,
    pub freeze_arms: bool,
    pub zero_features: bool,
}

impl SiremModel {
    pub fn init(feature_dim: usize, grid: GridSize, cfg: &TrainConfig) -> Result<Self> {
        let dims = DecoderDims {
            input: feature_dim,
            hidden: cfg.hidden.clone(),
            height: grid.height,
            width: grid.width,
        };
        Ok(Self {
            params: DecoderParams::init(dims, cfg.seed)?,
            logits: ArmLogits::default(),
            freeze_arms: cfg.freeze_arms,
            zero_features: cfg.zero_features,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.params.dims().input
    }

    pub fn method(&self) -> Method {
        if self.zero_features {
            Method::SiremNoAudio
        } else {
            Method::Sirem
        }
    }

    pub fn arm_profile(&self) -> ArmProfile {
        if self.freeze_arms {
            ArmProfile::ones()
        } else {
            profile(&self.logits)
        }
    }

    fn decoder_input(&self, h: &PooledFeature) -> Result<Vec<f32>> {
        let d = self.feature_dim();
        if h.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: h.dim(),
            });
        }
        Ok(if self.zero_features {
            vec![0.0; d]
        } else {
            h.0.iter().map(|&v| v as f32).collect()
        })
    }

    /// Audio-branch image for one pooled feature vector.
    pub fn audio_estimate(&self, h: &PooledFeature) -> Result<Array2<f64>> {
        let x = self.decoder_input(h)?;
        Decoder::decode(
            &self.params,
            &PooledFeature(x.iter().map(|&v| v as f64).collect()),
            Mode::Eval,
        )
    }

    /// Fused reconstruction of one frame.
    pub fn reconstruct(
        &self,
        frame: &KSpaceFrame,
        plan: &NufftPlan,
        maps: &SensitivityMaps,
        h: &PooledFeature,
        eba: &EbAMap,
    ) -> Result<ReconFrame> {
        let xa = self.audio_estimate(h)?;
        let xm = mri_forward(frame, plan, maps, &self.arm_profile())?.image;
        Ok(ReconFrame::new(fuse(&xa, &xm, eba)?, self.method()))
    }
}

/// One utterance's training tuples; maps and EbA map are shared by its frames.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub kspace: Vec<KSpaceFrame>,
    pub features: Vec<PooledFeature>,
    /// `[T, H, W]`.
    pub references: Array3<f64>,
    pub maps: SensitivityMaps,
    pub eba: EbAMap,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.kspace.len()
    }

    pub fn validate(&self, grid: GridSize) -> Result<()> {
        let t = self.kspace.len();
        if t == 0 {
            return Err(Error::EmptyInput(format!(
                "utterance {} has no frames",
                self.id
            )));
        }
        let (rt, h, w) = self.references.dim();
        if self.features.len() != t || rt != t {
            return Err(Error::ShapeMismatch(format!(
                "utterance {}: {t} k-space frames, {} feature vectors, {rt} references",
                self.id,
                self.features.len()
            )));
        }
        if (h, w) != grid.dim() || self.maps.grid() != grid || self.eba.dim() != grid.dim() {
            return Err(Error::ShapeMismatch(format!(
                "utterance {} does not match the {grid:?} grid",
                self.id
            )));
        }
        Ok(())
    }
}

/// A training tuple borrowed from an utterance.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub kspace: &'a KSpaceFrame,
    pub feature: &'a PooledFeature,
    pub reference: ndarray::ArrayView2<'a, f64>,
    pub maps: &'a SensitivityMaps,
    pub eba: &'a EbAMap,
}

impl Utterance {
    pub fn sample(&self, t: usize) -> Sample<'_> {
        Sample {
            kspace: &self.kspace[t],
            feature: &self.features[t],
            reference: self.references.index_axis(Axis(0), t),
            maps: &self.maps,
            eba: &self.eba,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub recon: f64,
    pub psf: f64,
    pub budget: f64,
    pub mask: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub decoder: DecoderParams<f32>,
    pub logits: [f64; R],
}

impl Gradients {
    pub fn zeros_for(model: &SiremModel) -> Self {
        Self {
            decoder: model.params.zeros_like(),
            logits: [0.0; R],
        }
    }

    pub fn global_norm(&self) -> f64 {
        let dec: f64 = self
            .decoder
            .tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum();
        (dec + self.logits.iter().map(|g| g * g).sum::<f64>()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|g| g.is_finite())
            && self
                .decoder
                .tensors()
                .iter()
                .all(|t| t.data.iter().all(|g| g.is_finite()))
    }
}

/// Batch-mean objective and its gradients with respect to decoder parameters and logits.
pub fn total_loss(
    batch: &[Sample<'_>],
    model: &SiremModel,
    plan: &NufftPlan,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<(LossTerms, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch".into()));
    }
    let b = batch.len();
    let dims = model.params.dims();
    let (h, w) = (dims.height, dims.width);
    let pixels = h * w;
    let mut inputs = Vec::with_capacity(b * dims.input);
    for s in batch {
        if s.reference.dim() != (h, w) {
            return Err(Error::ShapeMismatch(
                "reference frame vs decoder output".into(),
            ));
        }
        inputs.extend(model.decoder_input(s.feature)?);
    }
    let cache = Decoder::forward(&model.params, &inputs, b, mode)?;
    if cache.output().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decoder output".into()));
    }
    let p = model.arm_profile();
    let scale = 1.0 / b as f64;

    struct PerSample {
        recon: f64,
        mask: f64,
        g_audio: Vec<f32>,
        g_profile: [f64; R],
    }
    let per_sample: Vec<PerSample> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let out = &cache.output()[i * pixels..(i + 1) * pixels];
            let xa = Array2::from_shape_fn((h, w), |(r, c)| out[r * w + c] as f64);
            let fwd = mri_forward(s.kspace, plan, s.maps, &p)?;
            let fused = fuse(&xa, &fwd.image, s.eba)?;
            let resid = &fused - &s.reference;
            let recon = resid.iter().map(|r| r * r).sum::<f64>();
            if !recon.is_finite() {
                return Err(Error::NonFinite("reconstruction loss".into()));
            }
            let g_fused = resid.mapv(|r| 2.0 * r * scale);
            let wmap = s.eba.weights();
            let g_audio = Zip::from(&g_fused)
                .and(wmap)
                .map_collect(|&g, &w| (g * w) as f32);
            let g_profile = if model.freeze_arms {
                [0.0; R]
            } else {
                let g_mri = Zip::from(&g_fused)
                    .and(wmap)
                    .map_collect(|&g, &w| g * (1.0 - w));
                mri_backward(&fwd, &p, &g_mri, s.kspace, plan, s.maps)?
            };
            Ok(PerSample {
                recon,
                mask: mask_loss(s.eba),
                g_audio: g_audio.into_iter().collect(),
                g_profile,
            })
        })
        .collect::<Result<_>>()?;

    let mut terms = LossTerms {
        psf: psf_loss(&p.0),
        budget: budget_loss(&p.0, cfg.budget_k),
        ..LossTerms::default()
    };
    let mut upstream = Vec::with_capacity(b * pixels);
    let mut g_p = [0.0; R];
    for s in &per_sample {
        terms.recon += s.recon * scale;
        terms.mask += s.mask * scale;
        upstream.extend_from_slice(&s.g_audio);
        for (acc, g) in g_p.iter_mut().zip(s.g_profile) {
            *acc += g;
        }
    }
    terms.total =
        terms.recon + cfg.alpha * terms.psf + cfg.beta * terms.budget + cfg.gamma * terms.mask;
    if !terms.total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }

    let mut grads = Gradients::zeros_for(model);
    Decoder::backward(&model.params, &cache, &upstream, &mut grads.decoder)?;
    if !model.freeze_arms {
        let psf_g = psf_loss_grad(&p.0);
        let budget_g = budget_loss_grad(&p.0, cfg.budget_k);
        for i in 0..R {
            g_p[i] += cfg.alpha * psf_g[i] + cfg.beta * budget_g[i];
        }
        grads.logits = sigmoid_backward(&g_p, &p);
    }
    Ok((terms, grads))
}

/// Half-cosine decay from `lr` at epoch 0 to zero at `epochs`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.epochs == 0 {
        return cfg.lr;
    }
    let e = epoch.min(cfg.epochs) as f64;
    (0.5 * cfg.lr * (1.0 + (PI * e / cfg.epochs as f64).cos())).max(0.0)
}

/// Rescales `grads` to global norm `clip_norm` if it is larger. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, clip_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip_norm {
        let s = clip_norm / norm;
        for t in grads.decoder.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g = (*g as f64 * s) as f32);
        }
        grads.logits.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Optimizer state plus the model it updates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: SiremModel,
    m: DecoderParams<f32>,
    v: DecoderParams<f32>,
    m_logits: [f64; R],
    v_logits: [f64; R],
    pub step: u64,
    pub best_val_psnr: f64,
    pub best_epoch: usize,
    pub best: SiremModel,
}

impl TrainState {
    pub fn new(model: SiremModel) -> Self {
        Self {
            m: model.params.zeros_like(),
            v: model.params.zeros_like(),
            m_logits: [0.0; R],
            v_logits: [0.0; R],
            step: 0,
            best_val_psnr: f64::NEG_INFINITY,
            best_epoch: 0,
            best: model.clone(),
            model,
        }
    }
}

fn adamw_update(
    theta: f64,
    m: &mut f64,
    v: &mut f64,
    g: f64,
    lr: f64,
    wd: f64,
    bc1: f64,
    bc2: f64,
) -> f64 {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    theta * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)
}

/// One AdamW step. Decay is skipped for the logits and the layer-norm parameters.
pub fn optimizer_step(
    state: &mut TrainState,
    grads: &Gradients,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    if grads.decoder.dims() != state.model.params.dims() {
        return Err(Error::ShapeMismatch("gradient vs parameter dims".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let tensors = state
        .model
        .params
        .tensors_mut()
        .into_iter()
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
        .zip(grads.decoder.tensors());
    for (((p, m), v), g) in tensors {
        let wd = match p.kind {
            ParamKind::Weight | ParamKind::Bias => cfg.weight_decay,
            ParamKind::NormGain | ParamKind::NormOffset => 0.0,
        };
        for (((p, m), v), &g) in p
            .data
            .iter_mut()
            .zip(m.data.iter_mut())
            .zip(v.data.iter_mut())
            .zip(g.data)
        {
            let (mut m64, mut v64) = (*m as f64, *v as f64);
            *p = adamw_update(*p as f64, &mut m64, &mut v64, g as f64, lr, wd, bc1, bc2) as f32;
            *m = m64 as f32;
            *v = v64 as f32;
        }
    }
    if !state.model.freeze_arms {
        for i in 0..R {
            let (m, v) = (&mut state.m_logits[i], &mut state.v_logits[i]);
            state.model.logits.0[i] = adamw_update(
                state.model.logits.0[i],
                m,
                v,
                grads.logits[i],
                lr,
                0.0,
                bc1,
                bc2,
            );
        }
    }
    Ok(())
}

/// Mean over utterances of the frame-averaged PSNR of fused reconstructions.
pub fn validation_psnr(model: &SiremModel, split: &[Utterance], plan: &NufftPlan) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptyInput("validation split".into()));
    }
    let mut total = 0.0;
    for u in split {
        let per_frame: Vec<f64> = (0..u.frames())
            .into_par_iter()
            .map(|t| {
                let s = u.sample(t);
                let x = model.reconstruct(s.kspace, plan, s.maps, s.feature, s.eba)?;
                psnr(x.image.view(), s.reference, 1.0)
            })
            .collect::<Result<_>>()?;
        total += per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    }
    Ok(total / split.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossTerms,
    pub lr: f64,
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best checkpoint by validation PSNR.
    pub model: SiremModel,
    pub best_val_psnr: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ step.wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn validate_and_keep(
    state: &mut TrainState,
    val: &[Utterance],
    plan: &NufftPlan,
    epoch: usize,
) -> Result<f64> {
    let score = validation_psnr(&state.model, val, plan)?;
    if score > state.best_val_psnr {
        state.best_val_psnr = score;
        state.best_epoch = epoch;
        state.best = state.model.clone();
    }
    Ok(score)
}

/// Trains from `model`, validating before the first epoch, every `val_every`
/// epochs and after the last one.
pub fn train_loop(
    model: SiremModel,
    train: &[Utterance],
    val: &[Utterance],
    plan: &NufftPlan,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput(
            "training and validation splits must be nonempty".into(),
        ));
    }
    for u in train.iter().chain(val) {
        u.validate(plan.grid())?;
    }
    let mut ids: Vec<&str> = train.iter().chain(val).map(|u| u.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument(
            "training and validation utterance ids must be distinct".into(),
        ));
    }

    let mut state = TrainState::new(model);
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let initial = validate_and_keep(&mut state, val, plan, 0)?;
    log.push(EpochLog {
        epoch: 0,
        loss: LossTerms::default(),
        lr: cosine_lr(0, cfg),
        val_psnr: Some(initial),
    });

    let mut index: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(u, utt)| (0..utt.frames()).map(move |t| (u, t)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bad_steps = 0;
    for epoch in 1..=cfg.epochs {
        let lr = cosine_lr(epoch - 1, cfg);
        index.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        let mut counted = 0usize;
        for chunk in index.chunks(cfg.batch) {
            let batch: Vec<Sample<'_>> = chunk.iter().map(|&(u, t)| train[u].sample(t)).collect();
            let mode = Mode::Train {
                seed: step_seed(cfg.seed, state.step),
            };
            let step =
                total_loss(&batch, &state.model, plan, cfg, mode).and_then(|(terms, mut grads)| {
                    if !grads.is_finite() {
                        return Err(Error::NonFinite("gradient".into()));
                    }
                    clip_gradients(&mut grads, cfg.clip_norm);
                    Ok((terms, grads))
                });
            match step {
                Ok((terms, grads)) => {
                    bad_steps = 0;
                    optimizer_step(&mut state, &grads, lr, cfg)?;
                    sum.total += terms.total;
                    sum.recon += terms.recon;
                    sum.psf += terms.psf;
                    sum.budget += terms.budget;
                    sum.mask += terms.mask;
                    counted += 1;
                }
                Err(Error::NonFinite(what)) => {
                    bad_steps += 1;
                    if bad_steps >= 2 {
                        return Err(Error::Divergence(format!(
                            "non-finite {what} on two consecutive steps"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let n = counted.max(1) as f64;
        let loss = LossTerms {
            total: sum.total / n,
            recon: sum.recon / n,
            psf: sum.psf / n,
            budget: sum.budget / n,
            mask: sum.mask / n,
        };
        let val_psnr = if epoch % cfg.val_every == 0 || epoch == cfg.epochs {
            Some(validate_and_keep(&mut state, val, plan, epoch)?)
        } else {
            None
        };
        log.push(EpochLog {
            epoch,
            loss,
            lr,
            val_psnr,
        });
    }
    Ok(TrainOutcome {
        model: state.best,
        best_val_psnr: state.best_val_psnr,
        best_epoch: state.best_epoch,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nufft::GridderConfig;
    use crate::phantom::{build_utterance, generate, PhantomConfig};
    use crate::policy::{psf_loss_grad, sigmoid_backward};
    use crate::trajectory::gen_spiral;
    use proptest::prelude::*;

    const G: usize = 16;

    fn plan() -> NufftPlan {
        let t = gen_spiral(R, 96, 2.0, GridSize::square(G)).unwrap();
        NufftPlan::new(&t, &GridderConfig::default()).unwrap()
    }

    fn world(n: usize) -> (NufftPlan, Vec<Utterance>) {
        let plan = plan();
        let utts = (0..n)
            .map(|i| {
                let cfg = PhantomConfig {
                    grid: GridSize::square(G),
                    frames: 4,
                    coils: 2,
                    feature_dim: 6,
                    feature_steps: 2,
                    seed: 10 + i as u64,
                    ..PhantomConfig::default()
                };
                let seq = generate(&cfg).unwrap();
                build_utterance(&format!("u{i}"), &seq, &cfg, &plan, 1.5).unwrap()
            })
            .collect();
        (plan, utts)
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            hidden: vec![12],
            batch: 3,
            epochs: 2,
            val_every: 1,
            lr: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn model(cfg: &TrainConfig) -> SiremModel {
        SiremModel::init(6, GridSize::square(G), cfg).unwrap()
    }

    #[test]
    fn defaults_and_config_schema() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.alpha, c.beta, c.gamma, c.budget_k),
            (0.1, 0.01, 0.01, 2.0)
        );
        assert_eq!((c.lr, c.weight_decay, c.clip_norm), (1e-4, 1e-5, 1.0));
        assert_eq!((c.batch, c.epochs, c.val_every), (8, 20, 5));
        let parsed: TrainConfig = serde_json::from_str(r#"{"K": 3.0, "epochs": 4}"#).unwrap();
        assert_eq!((parsed.budget_k, parsed.epochs, parsed.batch), (3.0, 4, 8));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"k": 3.0}"#).is_err());
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig {
            batch: 0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { lr: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn cosine_schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(cosine_lr(0, &c), 1e-4);
        assert!(cosine_lr(20, &c).abs() < 1e-20);
        assert!((cosine_lr(10, &c) - 5e-5).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn cosine_schedule_non_increasing(epochs in 1usize..60, lr in 1e-6f64..1.0) {
            let c = TrainConfig { epochs, lr, ..TrainConfig::default() };
            for e in 0..epochs {
                prop_assert!(cosine_lr(e + 1, &c) <= cosine_lr(e, &c));
            }
        }

        #[test]
        fn clipping_never_increases_norm(g in proptest::array::uniform13(-5.0f64..5.0), clip in 0.1f64..4.0) {
            let m = model(&tiny_cfg());
            let mut grads = Gradients::zeros_for(&m);
            grads.logits = g;
            let before = grads.global_norm();
            clip_gradients(&mut grads, clip);
            let after = grads.global_norm();
            prop_assert!(after <= before * (1.0 + 1e-12));
            prop_assert!(after <= clip * (1.0 + 1e-12) || after == before);
            if before > 0.0 {
                let cos: f64 = g.iter().zip(&grads.logits).map(|(a, b)| a * b).sum::<f64>() / (before * after);
                prop_assert!((cos - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clipping_examples() {
        let m = model(&tiny_cfg());
        let mut small = Gradients::zeros_for(&m);
        small.logits[0] = 0.3;
        small.logits[1] = 0.4;
        let copy = small.clone();
        assert_eq!(clip_gradients(&mut small, 1.0), 0.5);
        assert_eq!(small, copy);

        let mut big = Gradients::zeros_for(&m);
        big.logits[2] = 1.2;
        big.logits[5] = -1.6;
        for t in big.decoder.tensors_mut().into_iter().take(1) {
            t.data[0] = 0.0;
        }
        assert!((clip_gradients(&mut big, 1.0) - 2.0).abs() < 1e-15);
        assert!((big.global_norm() - 1.0).abs() < 1e-15);
        assert_eq!((big.logits[2], big.logits[5]), (0.6, -0.8));

        // Decoder entries take part in the global norm.
        let mut mixed = Gradients::zeros_for(&m);
        mixed.logits[0] = 1.0;
        mixed.decoder.tensors_mut()[0].data[0] = 1.0;
        mixed.decoder.tensors_mut()[1].data[3] = -1.0;
        mixed.logits[1] = 1.0;
        assert_eq!(clip_gradients(&mut mixed, 1.0), 2.0);
        assert!((mixed.global_norm() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn adamw_closed_forms() {
        let (lr, g) = (1e-3, 0.37);
        let (mut m, mut v) = (0.0, 0.0);
        let bc1 = 1.0 - ADAM_BETA1;
        let bc2 = 1.0 - ADAM_BETA2;
        let theta = adamw_update(1.5, &mut m, &mut v, g, lr, 0.0, bc1, bc2);
        assert!((theta - (1.5 - lr * g / (g.abs() + ADAM_EPS))).abs() < 1e-15);
        assert!((theta - (1.5 - lr)).abs() < 1e-10);

        // Decay alone shrinks geometrically.
        let (mut m, mut v) = (0.0, 0.0);
        let mut theta = 2.0;
        for t in 1..=5 {
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            theta = adamw_update(theta, &mut m, &mut v, 0.0, 0.1, 0.5, bc1, bc2);
        }
        assert!((theta - 2.0 * 0.95f64.powi(5)).abs() < 1e-14);
    }

    #[test]
    fn optimizer_respects_decay_scoping() {
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..tiny_cfg()
        };
        let mut m = model(&cfg);
        m.logits.0[4] = 1.25;
        let mut state = TrainState::new(m.clone());
        let zero = Gradients::zeros_for(&m);
        optimizer_step(&mut state, &zero, 0.1, &cfg).unwrap();
        assert_eq!(state.model.logits, m.logits);
        for (after, before) in state.model.params.tensors().iter().zip(m.params.tensors()) {
            let factor = match before.kind {
                ParamKind::Weight | ParamKind::Bias => 0.95,
                _ => 1.0,
            };
            for (a, b) in after.data.iter().zip(before.data) {
                assert_eq!(*a, (*b as f64 * factor) as f32, "{}", before.name);
            }
        }
        // No decay, no gradient: nothing moves.
        let cfg0 = TrainConfig {
            weight_decay: 0.0,
            ..cfg
        };
        let mut state = TrainState::new(m.clone());
        optimizer_step(&mut state, &zero, 0.1, &cfg0).unwrap();
        assert_eq!(
            state.model.params.tensors()[0].data,
            m.params.tensors()[0].data
        );
        let mut bad = zero.clone();
        bad.logits[0] = f64::NAN;
        assert!(matches!(
            optimizer_step(&mut state, &bad, 0.1, &cfg0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn perfect_prediction_leaves_only_regularizers() {
        let (plan, utts) = world(1);
        let cfg = tiny_cfg();
        let mut m = model(&cfg);
        m.logits = ArmLogits([-6.0; R]);
        let mut u = utts[0].clone();
        u.eba = EbAMap::uniform(G, G, 1.0).unwrap();
        for t in 0..u.frames() {
            let xa = m.audio_estimate(&u.features[t]).unwrap();
            u.references.index_axis_mut(Axis(0), t).assign(&xa);
        }
        let batch: Vec<_> = (0..2).map(|t| u.sample(t)).collect();
        let (terms, _) = total_loss(&batch, &m, &plan, &cfg, Mode::Eval).unwrap();
        let p = profile(&m.logits);
        assert!(terms.recon < 1e-10, "recon {}", terms.recon);
        assert_eq!(terms.mask, 0.0);
        let expect = cfg.alpha * psf_loss(&p.0) + cfg.beta * budget_loss(&p.0, 2.0);
        assert!((terms.total - expect).abs() < 1e-10);
    }

    #[test]
    fn duplicated_sample_matches_single() {
        let (plan, utts) = world(1);
        let cfg = tiny_cfg();
        let m = model(&cfg);
        let s = utts[0].sample(1);
        let (one, g1) = total_loss(&[s], &m, &plan, &cfg, Mode::Eval).unwrap();
        let (two, g2) = total_loss(&[s, s], &m, &plan, &cfg, Mode::Eval).unwrap();
        assert!((one.total - two.total).abs() < 1e-12 * one.total.abs().max(1.0));
        for (a, b) in g1.logits.iter().zip(&g2.logits) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_is_sum_of_components() {
        let (plan, utts) = world(1);
        let base = tiny_cfg();
        let mut m = model(&base);
        m.logits = ArmLogits(std::array::from_fn(|i| 0.3 * i as f64 - 1.5));
        let batch: Vec<_> = (0..3).map(|t| utts[0].sample(t)).collect();
        let run = |alpha, beta| {
            let cfg = TrainConfig {
                alpha,
                beta,
                ..base.clone()
            };
            total_loss(&batch, &m, &plan, &cfg, Mode::Eval).unwrap().1
        };
        let g0 = run(0.0, 0.0);
        let g = run(0.1, 0.01);
        let p = profile(&m.logits);
        let psf_l = sigmoid_backward(&psf_loss_grad(&p.0).try_into().unwrap(), &p);
        let bud_l = sigmoid_backward(&budget_loss_grad(&p.0, 2.0).try_into().unwrap(), &p);
        for i in 0..R {
            let expect = g0.logits[i] + 0.1 * psf_l[i] + 0.01 * bud_l[i];
            assert!((g.logits[i] - expect).abs() < 1e-10);
        }
        assert_eq!(g.decoder, g0.decoder);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let (plan, utts) = world(1);
        let cfg = tiny_cfg();
        let mut m = model(&cfg);
        m.logits = ArmLogits(std::array::from_fn(|i| 0.2 * (i as f64 - 6.0)));
        let batch: Vec<_> = (0..2).map(|t| utts[0].sample(t)).collect();
        let (_, g) = total_loss(&batch, &m, &plan, &cfg, Mode::Eval).unwrap();
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        let scale = g.logits.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..R {
            let mut plus = m.clone();
            plus.logits.0[i] += h;
            let mut minus = m.clone();
            minus.logits.0[i] -= h;
            let lp = total_loss(&batch, &plus, &plan, &cfg, Mode::Eval)
                .unwrap()
                .0
                .total;
            let lm = total_loss(&batch, &minus, &plan, &cfg, Mode::Eval)
                .unwrap()
                .0
                .total;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - g.logits[i]).abs() / scale);
        }
        assert!(worst < 5e-3, "relative error {worst}");
    }

    #[test]
    fn linear_decoder_descends() {
        let (plan, utts) = world(1);
        let cfg = TrainConfig {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            hidden: vec![],
            lr: 1e-2,
            freeze_arms: true,
            ..tiny_cfg()
        };
        let mut state = TrainState::new(model(&cfg));
        let batch: Vec<_> = (0..4).map(|t| utts[0].sample(t)).collect();
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let (terms, grads) = total_loss(&batch, &state.model, &plan, &cfg, Mode::Eval).unwrap();
            assert!(terms.total < last, "{} !< {last}", terms.total);
            last = terms.total;
            optimizer_step(&mut state, &grads, cfg.lr, &cfg).unwrap();
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (plan, utts) = world(2);
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let m = model(&cfg);
        let out = train_loop(m.clone(), &utts[..1], &utts[1..], &plan, &cfg).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(
            out.best_val_psnr,
            validation_psnr(&m, &utts[1..], &plan).unwrap()
        );
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let (plan, utts) = world(3);
        let cfg = TrainConfig {
            epochs: 3,
            ..tiny_cfg()
        };
        let a = train_loop(model(&cfg), &utts[..2], &utts[2..], &plan, &cfg).unwrap();
        let b = train_loop(model(&cfg), &utts[..2], &utts[2..], &plan, &cfg).unwrap();
        assert_eq!(
            a.model.params.tensors()[0].data,
            b.model.params.tensors()[0].data
        );
        assert_eq!(a.model.logits, b.model.logits);
        assert_eq!(a.log, b.log);
        assert!(a
            .log
            .iter()
            .filter_map(|l| l.val_psnr)
            .all(|v| v <= a.best_val_psnr));
        assert!(a.log[3].loss.total < a.log[1].loss.total);
    }

    #[test]
    fn frozen_arms_and_zero_features() {
        let (plan, utts) = world(2);
        let cfg = TrainConfig {
            freeze_arms: true,
            zero_features: true,
            epochs: 1,
            ..tiny_cfg()
        };
        let out = train_loop(model(&cfg), &utts[..1], &utts[1..], &plan, &cfg).unwrap();
        assert_eq!(out.model.logits, ArmLogits::default());
        assert_eq!(out.model.arm_profile(), ArmProfile::ones());
        let f = &utts[0].features;
        assert_eq!(
            out.model.audio_estimate(&f[0]).unwrap(),
            out.model.audio_estimate(&f[1]).unwrap()
        );
        assert_eq!(out.model.method(), Method::SiremNoAudio);
    }

    #[test]
    fn split_errors_and_divergence() {
        let (plan, mut utts) = world(2);
        let cfg = tiny_cfg();
        assert!(matches!(
            train_loop(model(&cfg), &[], &utts, &plan, &cfg),
            Err(Error::EmptyInput(_))
        ));
        assert!(train_loop(model(&cfg), &utts[..1], &utts[..1], &plan, &cfg).is_err());
        for f in &mut utts[0].features {
            f.0[0] = f64::NAN;
        }
        let r = train_loop(model(&cfg), &utts[..1], &utts[1..], &plan, &cfg);
        assert!(matches!(r, Err(Error::Divergence(_))), "{r:?}");
    }
}
