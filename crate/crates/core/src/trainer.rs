//! Training: SNR / SI-SNR losses, the two-clue multitask objective, the fit loop and run configs.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clue::ClueKind;
use crate::error::{Error, Result};
use crate::evalkit::{self, EPS};
use crate::m2d::{EncoderMode, FeatureStack};
use crate::mixsim::{Manifest, MixConfig, MixtureSample, SourceBank};
use crate::model::{Backbone, ModelConfig, TseModel, M2D_PREFIX};
use crate::signal::{Waveform, SAMPLE_RATE};
use crate::soundbeam::waveform_batch;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the class-label path; the enrollment path gets `1 - alpha`.
    pub alpha: f64,
    pub snr_weight: f64,
    pub si_snr_weight: f64,
    /// Optional cap (dB) on the SI-SNR term: losses below `-cap` are clamped.
    pub si_snr_clamp: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            snr_weight: 0.5,
            si_snr_weight: 0.5,
            si_snr_clamp: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.snr_weight >= 0.0 && self.si_snr_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_refs(reference: &Tensor) -> Result<()> {
    let e = reference.sqr()?.sum(D::Minus1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if e.contains(&0.0) {
        return Err(Error::EmptyReference);
    }
    Ok(())
}

/// Per-row negative SNR in dB for `[B, T]` estimates and references.
pub fn snr_loss_t(est: &Tensor, reference: &Tensor) -> Result<Tensor> {
    check_refs(reference)?;
    let r2 = reference.sqr()?.sum(D::Minus1)?;
    let d2 = (reference - est)?.sqr()?.sum(D::Minus1)?;
    let den = (d2 + (&r2 * EPS)?)?;
    Ok(((den.log()? - r2.log()?)? * DB)?)
}

/// Per-row negative scale-invariant SNR in dB.
pub fn si_snr_loss_t(est: &Tensor, reference: &Tensor) -> Result<Tensor> {
    check_refs(reference)?;
    let e = est.broadcast_sub(&est.mean_keepdim(D::Minus1)?)?;
    let r = reference.broadcast_sub(&reference.mean_keepdim(D::Minus1)?)?;
    let rr = r.sqr()?.sum_keepdim(D::Minus1)?;
    if rr.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.contains(&0.0) {
        return Err(Error::EmptyReference);
    }
    let alpha = ((&e * &r)?.sum_keepdim(D::Minus1)? / rr)?;
    let s = r.broadcast_mul(&alpha)?;
    let n = (&e - &s)?;
    let floor = (e.sqr()?.sum(D::Minus1)? * EPS)?;
    let num = (s.sqr()?.sum(D::Minus1)? + &floor)?;
    let den = (n.sqr()?.sum(D::Minus1)? + &floor)?;
    Ok(((den.log()? - num.log()?)? * DB)?)
}

/// Batch-mean extraction loss `w_snr * L_snr + w_si * L_si`.
pub fn extraction_loss(est: &Tensor, reference: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let mut si = si_snr_loss_t(est, reference)?;
    if let Some(cap) = cfg.si_snr_clamp {
        si = si.clamp(-cap, f64::INFINITY)?;
    }
    let snr = snr_loss_t(est, reference)?;
    let l = ((snr * cfg.snr_weight)? + (si * cfg.si_snr_weight)?)?;
    Ok(l.mean_all()?)
}

fn host_pair(est: &Waveform, reference: &Waveform) -> Result<(Tensor, Tensor)> {
    let to = |w: &Waveform| -> Result<Tensor> {
        Ok(Tensor::from_vec(w.samples().to_vec(), (1, w.len()), &candle_core::Device::Cpu)?.to_dtype(DType::F64)?)
    };
    if est.len() != reference.len() {
        return Err(Error::Shape(format!("lengths {} and {}", est.len(), reference.len())));
    }
    Ok((to(est)?, to(reference)?))
}

/// Negative SNR (dB) of one estimate; floor `-60` at a perfect estimate.
pub fn snr_loss(est: &Waveform, reference: &Waveform) -> Result<f64> {
    let (e, r) = host_pair(est, reference)?;
    Ok(snr_loss_t(&e, &r)?.to_vec1::<f64>()?[0])
}

pub fn si_snr_loss(est: &Waveform, reference: &Waveform) -> Result<f64> {
    let (e, r) = host_pair(est, reference)?;
    Ok(si_snr_loss_t(&e, &r)?.to_vec1::<f64>()?[0])
}

/// Equal-length training examples; each row pairs a mixture with one of its targets.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub mixtures: Vec<Waveform>,
    pub references: Vec<Waveform>,
    pub classes: Vec<usize>,
    pub enrollments: Vec<Waveform>,
    /// Encoder features of the mixtures, used instead of encoding `mixtures` when present.
    pub mixture_stacks: Option<Vec<FeatureStack>>,
    /// Offline encoder features of the enrollments, used instead of `enrollments` when present.
    pub enrollment_stacks: Option<Vec<FeatureStack>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.mixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixtures.is_empty()
    }

    /// Every target of every sample at full length.
    pub fn from_samples(samples: &[MixtureSample]) -> Self {
        let mut b = Batch::default();
        for s in samples {
            for t in &s.targets {
                b.mixtures.push(s.mixture.clone());
                b.references.push(t.reference.clone());
                b.classes.push(t.class);
                b.enrollments.push(t.enrollment.clone());
            }
        }
        b
    }
}

/// Which clue paths a step evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Paths {
    pub label: bool,
    pub enroll: bool,
}

impl Paths {
    pub const BOTH: Paths = Paths { label: true, enroll: true };
}

/// Extraction losses of the two clue paths on the same mixtures (scalar tensors).
#[derive(Debug, Clone)]
pub struct PathLosses {
    pub label: Option<Tensor>,
    pub enroll: Option<Tensor>,
}

impl PathLosses {
    /// `alpha * label + (1 - alpha) * enroll`; a single evaluated path is returned as is.
    pub fn combine(&self, alpha: f64) -> Result<Tensor> {
        match (&self.label, &self.enroll) {
            (Some(l), Some(e)) => Ok(((l * alpha)? + (e * (1.0 - alpha))?)?),
            (Some(l), None) => Ok(l.clone()),
            (None, Some(e)) => Ok(e.clone()),
            (None, None) => Err(Error::Empty("clue paths")),
        }
    }

    pub fn values(&self) -> Result<(Option<f64>, Option<f64>)> {
        let v = |t: &Option<Tensor>| -> Result<Option<f64>> {
            t.as_ref()
                .map(|t| Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?))
                .transpose()
        };
        Ok((v(&self.label)?, v(&self.enroll)?))
    }
}

/// Runs the requested clue paths as one stacked forward pass over `[2B, T]`.
pub fn path_losses(model: &TseModel, batch: &Batch, cfg: &LossConfig, paths: Paths) -> Result<PathLosses> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let n_enroll = batch.enrollment_stacks.as_ref().map_or(batch.enrollments.len(), Vec::len);
    if paths.enroll && n_enroll != batch.len() {
        return Err(Error::Clue("every target needs an enrollment for the enrollment path".into()));
    }
    let dtype = model.dtype();
    let x = waveform_batch(&batch.mixtures, dtype)?;
    let r = waveform_batch(&batch.references, dtype)?;
    let stack = match &batch.mixture_stacks {
        Some(v) => Some(FeatureStack::cat(v)?),
        None => model.mixture_stack(&batch.mixtures)?,
    };
    let mut embeds = Vec::new();
    if paths.label {
        embeds.push(model.embed_labels(&batch.classes)?);
    }
    if paths.enroll {
        embeds.push(match &batch.enrollment_stacks {
            Some(v) => model.embed_enrollment_stacks(v)?,
            None => model.embed_enrollments(&batch.enrollments)?,
        });
    }
    let k = embeds.len();
    if k == 0 {
        return Err(Error::Empty("clue paths"));
    }
    let e = Tensor::cat(&embeds, 0)?;
    let xs = Tensor::cat(&vec![x; k], 0)?;
    let stacks = stack
        .map(|s| FeatureStack::cat(&vec![s; k]))
        .transpose()?;
    let y = model.forward(&xs, stacks.as_ref(), &e)?;
    let b = batch.len();
    let mut out = PathLosses { label: None, enroll: None };
    let mut i = 0;
    if paths.label {
        out.label = Some(extraction_loss(&y.narrow(0, 0, b)?, &r, cfg)?);
        i += 1;
    }
    if paths.enroll {
        out.enroll = Some(extraction_loss(&y.narrow(0, i * b, b)?, &r, cfg)?);
    }
    Ok(out)
}

/// Optimizer settings; Adam without weight decay plus global-norm clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 5e-4, grad_clip: 5.0 }
    }
}

/// Adam over the trainable parameters with gradient clipping.
pub struct Trainer {
    opt: AdamW,
    vars: Vec<Var>,
    clip: f64,
}

impl Trainer {
    /// Optimizes every parameter of `model`, except the encoder when `freeze_encoder` is set.
    pub fn new(model: &mut TseModel, cfg: &OptimConfig, freeze_encoder: bool) -> Result<Self> {
        model.set_encoder_frozen(freeze_encoder);
        let vars: Vec<Var> = model
            .store()
            .vars()
            .into_iter()
            .filter(|(n, _)| !(freeze_encoder && n.starts_with(M2D_PREFIX)))
            .map(|(_, v)| v)
            .collect();
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: 0.0,
                ..ParamsAdamW::default()
            },
        )?;
        Ok(Self {
            opt,
            vars,
            clip: cfg.grad_clip,
        })
    }

    pub fn n_trainable(&self) -> usize {
        self.vars.len()
    }

    /// One update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        if self.clip > 0.0 && norm > self.clip {
            let s = self.clip / norm;
            for v in &self.vars {
                if let Some(g) = grads.remove(v) {
                    grads.insert(v, (g * s)?);
                }
            }
        }
        self.opt.step(&grads)?;
        Ok(norm)
    }
}

/// Outcome of one multitask step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub label: Option<f64>,
    pub enroll: Option<f64>,
    pub grad_norm: f64,
}

/// Both clue paths on the same mixtures, combined with `alpha`, then one update.
///
/// With `alternate`, a single path is drawn per step (class label with probability `alpha`).
pub fn multitask_step(
    model: &TseModel,
    trainer: &mut Trainer,
    batch: &Batch,
    cfg: &LossConfig,
    alternate: Option<&mut ChaCha8Rng>,
) -> Result<StepStats> {
    cfg.validate()?;
    let paths = match alternate {
        Some(rng) => {
            let label = rng.random_bool(cfg.alpha);
            Paths { label, enroll: !label }
        }
        None => Paths {
            label: cfg.alpha > 0.0,
            enroll: cfg.alpha < 1.0,
        },
    };
    let pl = path_losses(model, batch, cfg, paths)?;
    let loss = pl.combine(cfg.alpha)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let (label, enroll) = pl.values()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let grad_norm = trainer.step(&loss)?;
    Ok(StepStats {
        loss: value,
        label,
        enroll,
        grad_norm,
    })
}

/// Settings of the fit loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Mixture crop length in seconds (full length when larger than the mixture).
    pub crop_s: f64,
    /// Enrollment crop length in seconds during training (evaluation uses full enrollments).
    pub enroll_crop_s: f64,
    pub loss: LossConfig,
    /// Leading steps trained on the SNR term alone (total weight kept).
    ///
    /// The SI-SNR term ignores the sign of the estimate and its gradient grows as the
    /// correlation with the reference shrinks, so from a random start it can lock the
    /// output into a small, inverted copy of the target.
    pub snr_warmup_steps: usize,
    pub optim: OptimConfig,
    pub alternate: bool,
    pub freeze_m2d: bool,
    /// Validation period in steps (0: only at the end).
    pub valid_every: usize,
    /// Clue kinds averaged in the validation SI-SNR.
    pub valid_clues: Vec<ClueKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            batch_size: 4,
            crop_s: 0.25,
            enroll_crop_s: 1.0,
            loss: LossConfig::default(),
            snr_warmup_steps: 100,
            optim: OptimConfig::default(),
            alternate: false,
            freeze_m2d: true,
            valid_every: 250,
            valid_clues: vec![ClueKind::ClassLabel, ClueKind::Enrollment],
        }
    }
}

/// Counters and selection state of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub best_valid_si_snr: f64,
    pub best_step: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        loss: f64,
        label_loss: Option<f64>,
        enroll_loss: Option<f64>,
        grad_norm: f64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        aie_weights: Option<Vec<f64>>,
    },
    Valid {
        step: usize,
        si_snr_db: f64,
        best_si_snr_db: f64,
    },
}

pub struct FitOutcome {
    pub model: TseModel,
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

/// Draws a crop of `len` samples where the reference carries at least a fair share of its energy.
fn crop_offset(rng: &mut ChaCha8Rng, reference: &[f32], len: usize) -> usize {
    let n = reference.len();
    if len >= n {
        return 0;
    }
    let total: f64 = reference.iter().map(|&v| (v as f64).powi(2)).sum();
    let want = 0.25 * total * len as f64 / n as f64;
    let mut best = (0usize, -1.0f64);
    for _ in 0..20 {
        let off = rng.random_range(0..=n - len);
        let e: f64 = reference[off..off + len].iter().map(|&v| (v as f64).powi(2)).sum();
        if e >= want && e > 0.0 {
            return off;
        }
        if e > best.1 {
            best = (off, e);
        }
    }
    best.0
}

fn crop(w: &Waveform, off: usize, len: usize) -> Result<Waveform> {
    let end = (off + len).min(w.len());
    Waveform::new(w.samples()[off..end].to_vec(), SAMPLE_RATE)
}

/// Mean SI-SNR over the validation clue kinds.
pub fn validate(model: &TseModel, samples: &[MixtureSample], clues: &[ClueKind]) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for &k in clues {
        for m in evalkit::evaluate_samples(model, samples, k)? {
            acc += m.si_snr_db;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("validation set"));
    }
    Ok(acc / n as f64)
}

/// Full-length encoder features of a training set, present only for a frozen encoder.
struct FeatureCache {
    mixtures: Option<Vec<FeatureStack>>,
    enrollments: Option<Vec<Vec<FeatureStack>>>,
}

impl FeatureCache {
    fn build(model: &TseModel, train: &[MixtureSample]) -> Result<Self> {
        let mut cache = FeatureCache { mixtures: None, enrollments: None };
        if !model.encoder_frozen() {
            return Ok(cache);
        }
        if model.feature_granule().is_some() {
            cache.mixtures = Some(
                train
                    .iter()
                    .map(|s| model.mixture_stack(std::slice::from_ref(&s.mixture)).map(|m| m.expect("mixture path")))
                    .collect::<Result<_>>()?,
            );
        }
        if let Some(m2d) = model.m2d().filter(|_| model.mhfa().is_some()) {
            cache.enrollments = Some(
                train
                    .iter()
                    .map(|s| {
                        s.targets
                            .iter()
                            .map(|t| {
                                Ok(m2d
                                    .encode_waveforms(std::slice::from_ref(&t.enrollment), EncoderMode::Offline)?
                                    .detach())
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?,
            );
        }
        Ok(cache)
    }
}

/// Trains `model` on `train`, keeping the parameters with the best validation SI-SNR.
///
/// With `out_dir`, the log is written as JSON lines to `train_log.jsonl` and a
/// diagnostic checkpoint is saved if the loss stops being finite.
pub fn fit_with(
    mut model: TseModel,
    train: &[MixtureSample],
    valid: &[MixtureSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitOutcome> {
    cfg.loss.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let n_classes = model.config().n_classes;
    for s in train.iter().chain(valid) {
        if let Some(t) = s.targets.iter().find(|t| t.class >= n_classes) {
            return Err(Error::UnknownClass(t.class));
        }
    }
    let mut trainer = Trainer::new(&mut model, &cfg.optim, cfg.freeze_m2d)?;
    let warmup_loss = LossConfig {
        snr_weight: cfg.loss.snr_weight + cfg.loss.si_snr_weight,
        si_snr_weight: 0.0,
        ..cfg.loss.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut alt_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa17e);
    let crop_len = ((cfg.crop_s * SAMPLE_RATE as f64).round() as usize).max(model.config().min_samples());
    // the encoder path of the enrollment needs at least one token
    let enroll_len = ((cfg.enroll_crop_s * SAMPLE_RATE as f64).round() as usize).max(448);

    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(std::io::BufWriter::new(std::fs::File::create(d.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &rec)?;
            writeln!(f)?;
            f.flush()?;
        }
        log.push(rec);
        Ok(())
    };

    // With a frozen encoder the features are computed once at full length, so crops see the
    // same context the model gets at inference.
    let cache = FeatureCache::build(&model, train)?;
    let granule = cache.mixtures.as_ref().and(model.feature_granule()).unwrap_or(1);

    let pairs: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.targets.len()).map(move |j| (i, j)))
        .collect();
    let mut order = pairs.clone();
    let mut cursor = order.len();
    let mut state = TrainState {
        step: 0,
        epoch: 0,
        seed: cfg.seed,
        best_valid_si_snr: f64::NEG_INFINITY,
        best_step: 0,
    };
    let mut best = None;
    let valid_set = if valid.is_empty() { train } else { valid };

    for step in 1..=cfg.steps {
        let mut batch = Batch::default();
        let mut mix_stacks = Vec::new();
        let mut enroll_stacks = Vec::new();
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
                state.epoch += 1;
            }
            let (i, j) = order[cursor];
            cursor += 1;
            let s = &train[i];
            let t = &s.targets[j];
            let len = crop_len.min(s.mixture.len());
            let off = crop_offset(&mut rng, t.reference.samples(), len);
            let off = off - off % granule;
            batch.mixtures.push(crop(&s.mixture, off, len)?);
            batch.references.push(crop(&t.reference, off, len)?);
            batch.classes.push(t.class);
            if let Some(m) = &cache.mixtures {
                mix_stacks.push(model.crop_mixture_stack(&m[i], off, len)?);
            }
            match &cache.enrollments {
                Some(e) => enroll_stacks.push(e[i][j].clone()),
                None => {
                    let elen = enroll_len.min(t.enrollment.len());
                    let eoff = crop_offset(&mut rng, t.enrollment.samples(), elen);
                    batch.enrollments.push(crop(&t.enrollment, eoff, elen)?);
                }
            }
        }
        if !mix_stacks.is_empty() {
            // rows can run short at the end of a mixture
            let n = mix_stacks.iter().map(FeatureStack::n_rows).min().unwrap_or(0);
            batch.mixture_stacks = Some(
                mix_stacks
                    .iter()
                    .map(|m| m.rows(0, n))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        if !enroll_stacks.is_empty() {
            batch.enrollment_stacks = Some(enroll_stacks);
        }
        let alt = if cfg.alternate { Some(&mut alt_rng) } else { None };
        let loss_cfg = if step <= cfg.snr_warmup_steps { &warmup_loss } else { &cfg.loss };
        let stats = match multitask_step(&model, &mut trainer, &batch, loss_cfg, alt) {
            Ok(s) => s,
            Err(Error::NonFinite(_)) => {
                let snapshot = match out_dir {
                    Some(d) => {
                        let p = d.join("nonfinite_snapshot.safetensors");
                        crate::checkpoint::save_with(&model, &[("step", step.to_string())], &p)?;
                        Some(p)
                    }
                    None => None,
                };
                return Err(Error::NonFiniteLoss { step, snapshot });
            }
            Err(e) => return Err(e),
        };
        state.step = step;
        emit(
            LogRecord::Step {
                step,
                epoch: state.epoch,
                loss: stats.loss,
                label_loss: stats.label,
                enroll_loss: stats.enroll,
                grad_norm: stats.grad_norm,
                aie_weights: model.aie_weights()?,
            },
            &mut log,
        )?;
        let due = (cfg.valid_every > 0 && step % cfg.valid_every == 0) || step == cfg.steps;
        if due {
            let v = validate(&model, valid_set, &cfg.valid_clues)?;
            if v > state.best_valid_si_snr {
                state.best_valid_si_snr = v;
                state.best_step = step;
                best = Some(model.store().snapshot()?);
            }
            emit(
                LogRecord::Valid {
                    step,
                    si_snr_db: v,
                    best_si_snr_db: state.best_valid_si_snr,
                },
                &mut log,
            )?;
        }
    }
    if let Some(b) = best {
        model.store().restore(&b)?;
    }
    Ok(FitOutcome { model, state, log })
}

/// Flat run description: a model preset plus overrides, data and training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: String,
    pub backbone: Option<Backbone>,
    pub m2d_enroll: Option<bool>,
    pub m2d_mixture: Option<bool>,
    pub n_classes: usize,
    pub n_train: usize,
    /// 0: select on the training set.
    pub n_valid: usize,
    pub data_seed: u64,
    pub duration_s: f64,
    pub enrollment_s: f64,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub crop_s: f64,
    pub enroll_crop_s: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub alpha: f64,
    pub snr_weight: f64,
    pub si_snr_weight: f64,
    pub si_snr_clamp: Option<f64>,
    pub snr_warmup_steps: usize,
    pub alternate: bool,
    pub freeze_m2d: bool,
    pub valid_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            preset: "soundbeam-baseline".into(),
            backbone: None,
            m2d_enroll: None,
            m2d_mixture: None,
            n_classes: 4,
            n_train: 16,
            n_valid: 0,
            data_seed: 1,
            duration_s: 6.0,
            enrollment_s: 6.0,
            seed: t.seed,
            steps: t.steps,
            batch_size: t.batch_size,
            crop_s: t.crop_s,
            enroll_crop_s: t.enroll_crop_s,
            lr: t.optim.lr,
            grad_clip: t.optim.grad_clip,
            alpha: t.loss.alpha,
            snr_weight: t.loss.snr_weight,
            si_snr_weight: t.loss.si_snr_weight,
            si_snr_clamp: None,
            snr_warmup_steps: t.snr_warmup_steps,
            alternate: false,
            freeze_m2d: true,
            valid_every: t.valid_every,
        }
    }
}

/// A run config with every choice made explicit.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub model: ModelConfig,
    pub bank: SourceBank,
    pub mix: MixConfig,
    pub train: TrainConfig,
    pub run: RunConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the preset and overrides; the returned `run` has all overrides filled in.
    pub fn resolve(&self) -> Result<ResolvedRun> {
        let mut model = ModelConfig::preset(&self.preset, self.n_classes)?;
        if let Some(b) = self.backbone {
            if b != model.backbone {
                let keep = (model.m2d_enroll, model.m2d_mixture);
                model = ModelConfig::toy(b, self.n_classes);
                model.m2d_enroll = keep.0;
                model.m2d_mixture = keep.1;
            }
        }
        if let Some(v) = self.m2d_enroll {
            model.m2d_enroll = v;
        }
        if let Some(v) = self.m2d_mixture {
            model.m2d_mixture = v;
        }
        model.validate()?;
        let bank = SourceBank::toy(self.n_classes)?;
        let mix = MixConfig {
            duration_s: self.duration_s,
            enrollment_s: self.enrollment_s,
            max_events: MixConfig::default().max_events.min(self.n_classes),
            min_events: MixConfig::default().min_events.min(self.n_classes),
            ..MixConfig::default()
        };
        mix.validate(&bank)?;
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        let train = TrainConfig {
            seed: self.seed,
            steps: self.steps,
            batch_size: self.batch_size,
            crop_s: self.crop_s,
            enroll_crop_s: self.enroll_crop_s,
            loss: LossConfig {
                alpha: self.alpha,
                snr_weight: self.snr_weight,
                si_snr_weight: self.si_snr_weight,
                si_snr_clamp: self.si_snr_clamp,
            },
            snr_warmup_steps: self.snr_warmup_steps,
            optim: OptimConfig {
                lr: self.lr,
                grad_clip: self.grad_clip,
            },
            alternate: self.alternate,
            freeze_m2d: self.freeze_m2d,
            valid_every: self.valid_every,
            ..TrainConfig::default()
        };
        train.loss.validate()?;
        if train.batch_size == 0 || !(train.optim.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        let run = RunConfig {
            backbone: Some(model.backbone),
            m2d_enroll: Some(model.m2d_enroll),
            m2d_mixture: Some(model.m2d_mixture),
            ..self.clone()
        };
        Ok(ResolvedRun {
            model,
            bank,
            mix,
            train,
            run,
        })
    }
}

impl ResolvedRun {
    pub fn train_manifest(&self) -> Result<Manifest> {
        Manifest::generate(&self.bank, &self.mix, self.run.n_train, self.run.data_seed)
    }

    /// Validation manifest from a seed stream disjoint from training.
    pub fn valid_manifest(&self) -> Result<Manifest> {
        Manifest::generate(
            &self.bank,
            &self.mix,
            self.run.n_valid,
            crate::mixsim::mix_seed(&[0xda7a, self.run.data_seed]),
        )
    }
}

/// Files produced by [`fit_run`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub resolved: PathBuf,
    pub log: PathBuf,
    pub train_manifest: PathBuf,
    pub valid_manifest: Option<PathBuf>,
}

/// Generates data, trains, and writes checkpoint, resolved config, manifests and log into `out_dir`.
pub fn fit_run(run: &RunConfig, out_dir: &Path) -> Result<(FitOutcome, RunFiles)> {
    let r = run.resolve()?;
    std::fs::create_dir_all(out_dir)?;
    let files = RunFiles {
        checkpoint: out_dir.join("model.safetensors"),
        resolved: out_dir.join("resolved.toml"),
        log: out_dir.join("train_log.jsonl"),
        train_manifest: out_dir.join("train.jsonl"),
        valid_manifest: (r.run.n_valid > 0).then(|| out_dir.join("valid.jsonl")),
    };
    std::fs::write(&files.resolved, r.run.to_toml()?)?;
    let train_m = r.train_manifest()?;
    train_m.save(&files.train_manifest)?;
    let train = train_m.realize_all()?;
    let valid = match &files.valid_manifest {
        Some(p) => {
            let m = r.valid_manifest()?;
            m.save(p)?;
            m.realize_all()?
        }
        None => Vec::new(),
    };
    let model = TseModel::new(&r.model, r.train.seed, DType::F32)?;
    let out = fit_with(model, &train, &valid, &r.train, Some(out_dir))?;
    crate::checkpoint::save_with(
        &out.model,
        &[
            ("best_step", out.state.best_step.to_string()),
            ("best_valid_si_snr_db", out.state.best_valid_si_snr.to_string()),
        ],
        &files.checkpoint,
    )?;
    Ok((out, files))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), (1, v.len()), &Device::Cpu).unwrap()
    }

    fn w(v: Vec<f32>) -> Waveform {
        Waveform::new(v, 16000).unwrap()
    }

    #[test]
    fn loss_examples() {
        let r: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let reference = w(r.clone());
        assert!((snr_loss(&reference, &reference).unwrap() + 60.0).abs() < 1e-9);
        let zero = w(vec![0.0; 64]);
        assert!(snr_loss(&zero, &reference).unwrap().abs() < 1e-5);
        assert!((si_snr_loss(&reference.scaled(3.7), &reference).unwrap() + 60.0).abs() < 1e-3);
        assert!(matches!(snr_loss(&reference, &zero), Err(Error::EmptyReference)));
        assert!(matches!(si_snr_loss(&reference, &zero), Err(Error::EmptyReference)));
    }

    #[test]
    fn tensor_losses_match_metrics() {
        let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.21).sin() + 0.3 * (i as f64 * 1.3).cos()).collect();
        let b: Vec<f64> = (0..100).map(|i| (i as f64 * 0.21).sin()).collect();
        let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let ta = Tensor::from_vec(af.iter().map(|&v| v as f64).collect::<Vec<_>>(), (1, 100), &Device::Cpu).unwrap();
        let tb = Tensor::from_vec(bf.iter().map(|&v| v as f64).collect::<Vec<_>>(), (1, 100), &Device::Cpu).unwrap();
        let l = snr_loss_t(&ta, &tb).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((l + evalkit::snr_db_slice(&af, &bf).unwrap()).abs() < 1e-9);
        let l = si_snr_loss_t(&ta, &tb).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((l + evalkit::si_snr_db_slice(&af, &bf).unwrap()).abs() < 1e-9);
        let _ = t(&a);
    }

    #[test]
    fn clamp_limits_si_snr_term() {
        let r = t(&(0..32).map(|i| (i as f64).sin()).collect::<Vec<_>>());
        let cfg = LossConfig {
            snr_weight: 0.0,
            si_snr_weight: 1.0,
            si_snr_clamp: Some(20.0),
            ..LossConfig::default()
        };
        let l = extraction_loss(&r, &r, &cfg).unwrap().to_scalar::<f64>().unwrap();
        assert!((l + 20.0).abs() < 1e-12);
    }

    #[test]
    fn run_config_round_trips_and_resolves() {
        let run = RunConfig::from_toml("preset = \"soundbeam-m2d-full\"\nsteps = 7\n").unwrap();
        let r = run.resolve().unwrap();
        assert!(r.model.m2d_enroll && r.model.m2d_mixture);
        let text = r.run.to_toml().unwrap();
        let again = RunConfig::from_toml(&text).unwrap().resolve().unwrap();
        assert_eq!(again, r);
        let over = RunConfig::from_toml("preset = \"soundbeam-m2d-full\"\nm2d_mixture = false\n").unwrap();
        assert!(!over.resolve().unwrap().model.m2d_mixture);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("alpha = 2.0").unwrap().resolve().is_err());
        assert!(RunConfig::from_toml("preset = \"nope\"").unwrap().resolve().is_err());
    }
}
