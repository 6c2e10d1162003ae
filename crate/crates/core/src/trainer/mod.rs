//! Teacher pretraining and slot-level distillation into a narrow student.

mod optim;
mod record;

pub use optim::{clip_gradients, global_norm, warmup_lr, Adam};
pub use record::{BoundProbe, RunRecord, StepLog, RUN_COLUMNS};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::VideoBatch;
use crate::losses::{
    adapted_mse, rec_loss, slot_contrast_loss, slot_kd_loss, slot_kd_mse, total_loss, Adapter, LossError,
    LossWeights, MatchStrategy,
};
use crate::model::{encode_frozen, forward_video_vars, slot_noise, ModelConfig, ModelError, ModelWeights};
use crate::tensor::{Precision, Tape, Tensor, TensorError};
use crate::theory::{verify_theorem, BoundMode, SlotDecoder, TheoryError};

/// Which distillation term feeds the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdVariant {
    /// Student trained alone.
    None,
    /// Cosine distance between corrected slots.
    #[default]
    SlotCosine,
    /// Squared distance between corrected slots.
    SlotMse,
    /// Cosine distance between predicted slots (before slot attention).
    SlotPredicted,
    /// MSE between student features and adapted teacher features.
    Feature,
    /// MSE between student reconstructions and adapted teacher reconstructions.
    Reconstruction,
    /// Cosine slot term plus the reconstruction term.
    SlotCosineReconstruction,
}

impl KdVariant {
    pub const ALL: [KdVariant; 7] = [
        KdVariant::None,
        KdVariant::SlotCosine,
        KdVariant::SlotMse,
        KdVariant::SlotPredicted,
        KdVariant::Feature,
        KdVariant::Reconstruction,
        KdVariant::SlotCosineReconstruction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KdVariant::None => "none",
            KdVariant::SlotCosine => "slot_cosine",
            KdVariant::SlotMse => "slot_mse",
            KdVariant::SlotPredicted => "slot_predicted",
            KdVariant::Feature => "feature",
            KdVariant::Reconstruction => "reconstruction",
            KdVariant::SlotCosineReconstruction => "slot_cosine_reconstruction",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn uses_adapter(self) -> bool {
        matches!(
            self,
            KdVariant::Feature | KdVariant::Reconstruction | KdVariant::SlotCosineReconstruction
        )
    }

    fn needs_teacher_decoder(self) -> bool {
        matches!(self, KdVariant::Reconstruction | KdVariant::SlotCosineReconstruction)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Videos per mini-batch.
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub kd_variant: KdVariant,
    #[serde(rename = "match")]
    pub match_strategy: MatchStrategy,
    /// Steps between bound probes during distillation; 0 disables them.
    pub probe_every: usize,
    /// Videos in the fixed bound-probe set.
    pub probe_videos: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 8e-4,
            warmup_steps: 100,
            grad_clip: 0.05,
            seed: 42,
            kd_variant: KdVariant::SlotCosine,
            match_strategy: MatchStrategy::Index,
            probe_every: 100,
            probe_videos: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.steps < 1 {
            return bad("steps must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        record: Box<RunRecord>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Numerical failures that end a run rather than indicate a programming error.
fn divergence_reason(e: &TrainError) -> Option<String> {
    let tensor = match e {
        TrainError::Model(ModelError::Tensor(t)) | TrainError::Loss(LossError::Tensor(t)) => Some(t),
        _ => None,
    };
    match (e, tensor) {
        (_, Some(t @ (TensorError::NonFinite { .. } | TensorError::Degenerate { .. }))) => Some(t.to_string()),
        (TrainError::Model(m @ (ModelError::DegenerateSlot { .. } | ModelError::DegenerateFeatures)), _) => {
            Some(m.to_string())
        }
        (TrainError::Loss(l @ LossError::DegenerateSlot { .. }), _) => Some(l.to_string()),
        _ => None,
    }
}

/// Frozen encoder outputs for every frame of `data`, ordered `(video, frame)`.
pub fn frozen_features(weights: &ModelWeights, data: &VideoBatch) -> Result<Vec<Tensor>> {
    let cfg = weights.config();
    if data.height != cfg.image_size || data.width != cfg.image_size {
        return Err(TrainError::Config(format!(
            "data frames are {}x{}, model expects {}",
            data.height, data.width, cfg.image_size
        )));
    }
    (0..data.batch * data.frames)
        .into_par_iter()
        .map(|i| {
            let mut tape = Tape::new(Precision::Single);
            let b = weights.bind(&mut tape, false);
            let f = encode_frozen(&mut tape, &b, cfg, data.frame(i / data.frames, i % data.frames))?;
            Ok(tape.value(f).clone())
        })
        .collect()
}

/// Everything a distillation term can need from the teacher for one frame.
#[derive(Clone, Debug)]
struct TeacherFrame {
    predicted: Tensor,
    corrected: Tensor,
    features: Tensor,
    reconstruction: Option<Tensor>,
}

fn teacher_frames(
    teacher: &ModelWeights,
    cache: &[Tensor],
    frames: usize,
    videos: &[usize],
    noises: &[Tensor],
    with_decoder: bool,
) -> Result<Vec<TeacherFrame>> {
    let mut tape = Tape::new(Precision::Single);
    let b = teacher.bind(&mut tape, false);
    let mut out = Vec::with_capacity(videos.len() * frames);
    for (&v, noise) in videos.iter().zip(noises) {
        let frozen: Vec<_> = (0..frames).map(|t| tape.constant(cache[v * frames + t].clone())).collect();
        let fv = forward_video_vars(&mut tape, &b, teacher.config(), &frozen, noise, with_decoder)?;
        for f in fv {
            out.push(TeacherFrame {
                predicted: tape.value(f.predicted).clone(),
                corrected: tape.value(f.corrected).clone(),
                features: tape.value(f.features).clone(),
                reconstruction: f.decoded.map(|d| tape.value(d.reconstruction).clone()),
            });
        }
    }
    Ok(out)
}

/// Frozen teacher and its cached encoder outputs.
pub struct TeacherContext<'a> {
    pub weights: &'a ModelWeights,
    pub cache: &'a [Tensor],
}

/// Corrected slots of every frame of `videos`, one row per slot, with a fixed noise seed.
fn probe_slots(weights: &ModelWeights, cache: &[Tensor], frames: usize, videos: &[usize]) -> Result<Vec<Vec<f64>>> {
    let cfg = weights.config();
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_NOISE_SEED);
    let noises: Vec<Tensor> = videos.iter().map(|_| slot_noise(cfg, &mut rng)).collect();
    let frames = teacher_frames(weights, cache, frames, videos, &noises, false)?;
    Ok(frames
        .iter()
        .flat_map(|f| (0..f.corrected.rows()).map(move |i| f.corrected.row(i).to_vec()))
        .collect())
}

const PROBE_NOISE_SEED: u64 = 0x9e37_79b9;

/// Outcome of one training run.
pub struct Trained {
    pub weights: ModelWeights,
    pub adapter: Option<Adapter>,
    pub record: RunRecord,
}

struct Run<'a> {
    student: ModelWeights,
    adapter: Option<Adapter>,
    cache: &'a [Tensor],
    frames: usize,
    videos: usize,
    teacher: Option<TeacherContext<'a>>,
    cfg: &'a TrainConfig,
    losses: LossWeights,
    variant: KdVariant,
    adam: Adam,
}

struct StepValues {
    rec: f64,
    contrast: f64,
    kd: f64,
    total: f64,
    grad_norm: f64,
}

impl Run<'_> {
    fn step(&mut self, step: usize, batch: &[usize], noises: &[Tensor]) -> Result<StepValues> {
        let cfg = self.student.config().clone();
        let frames = self.frames;
        let teacher = match &self.teacher {
            Some(t) if self.variant != KdVariant::None => Some(teacher_frames(
                t.weights,
                t.cache,
                frames,
                batch,
                noises,
                self.variant.needs_teacher_decoder(),
            )?),
            _ => None,
        };

        let mut tape = Tape::new(Precision::Single);
        let b = self.student.bind(&mut tape, true);
        let adapter_vars = self.adapter.as_ref().map(|a| a.bind(&mut tape));
        let mut recon = Vec::new();
        let mut targets = Vec::new();
        let mut corrected = Vec::new();
        let mut predicted = Vec::new();
        let mut features = Vec::new();
        for (&v, noise) in batch.iter().zip(noises) {
            let frozen: Vec<_> = (0..frames)
                .map(|t| tape.constant(self.cache[v * frames + t].clone()))
                .collect();
            let fv = forward_video_vars(&mut tape, &b, &cfg, &frozen, noise, true)?;
            for (f, &target) in fv.iter().zip(&frozen) {
                recon.push(f.decoded.expect("decoder enabled").reconstruction);
                targets.push(target);
                corrected.push(f.corrected);
                predicted.push(f.predicted);
                features.push(f.features);
            }
        }
        let rec = rec_loss(&mut tape, &recon, &targets)?;
        let contrast = if frames >= 2 {
            Some(slot_contrast_loss(&mut tape, &corrected, frames, self.losses.tau)?)
        } else {
            None
        };
        let kd = match &teacher {
            None => None,
            Some(tf) => {
                let pick = |f: fn(&TeacherFrame) -> &Tensor| tf.iter().map(f).cloned().collect::<Vec<_>>();
                let strategy = self.cfg.match_strategy;
                Some(match self.variant {
                    KdVariant::None => unreachable!("no teacher pass without distillation"),
                    KdVariant::SlotCosine => slot_kd_loss(&mut tape, &corrected, &pick(|f| &f.corrected), strategy)?,
                    KdVariant::SlotMse => slot_kd_mse(&mut tape, &corrected, &pick(|f| &f.corrected), strategy)?,
                    KdVariant::SlotPredicted => {
                        slot_kd_loss(&mut tape, &predicted, &pick(|f| &f.predicted), strategy)?
                    }
                    KdVariant::Feature => {
                        let a = adapter_vars.as_ref().expect("adapter for feature distillation");
                        adapted_mse(&mut tape, &features, &pick(|f| &f.features), a)?
                    }
                    KdVariant::Reconstruction | KdVariant::SlotCosineReconstruction => {
                        let a = adapter_vars.as_ref().expect("adapter for reconstruction distillation");
                        let teacher_rec: Vec<Tensor> =
                            tf.iter().map(|f| f.reconstruction.clone().expect("teacher decoded")).collect();
                        let r = adapted_mse(&mut tape, &recon, &teacher_rec, a)?;
                        if self.variant == KdVariant::SlotCosineReconstruction {
                            let s = slot_kd_loss(&mut tape, &corrected, &pick(|f| &f.corrected), strategy)?;
                            tape.add(s, r).map_err(LossError::from)?
                        } else {
                            r
                        }
                    }
                })
            }
        };
        let contrast_term = contrast.filter(|_| self.losses.alpha != 0.0);
        let kd_term = kd.filter(|_| self.losses.beta != 0.0);
        let total = total_loss(&mut tape, rec, contrast_term, kd_term, &self.losses)?;
        let values = |v: Option<_>| v.map_or(0.0, |v| tape.value(v).item());
        let (rec_v, contrast_v, kd_v) = (tape.value(rec).item(), values(contrast), values(kd));
        // Logged in double precision from the logged parts; the single-precision
        // tape total differs only by rounding.
        let total_v = rec_v
            + contrast_term.map_or(0.0, |_| self.losses.alpha * contrast_v)
            + kd_term.map_or(0.0, |_| self.losses.beta * kd_v);

        let mut grads = tape.backward(total).map_err(LossError::from)?;
        let mut named: Vec<(String, Vec<f64>)> = Vec::new();
        for name in self.student.trainable_names() {
            let g = grads
                .take(b.var(&name))
                .map(|t| t.into_data())
                .unwrap_or_else(|| vec![0.0; self.student.get(&name).expect("bound").numel()]);
            named.push((name, g));
        }
        if let (Some(adapter), Some(av)) = (&self.adapter, &adapter_vars) {
            for (name, var) in Adapter::NAMES.iter().zip(av.0) {
                let g = grads
                    .take(var)
                    .map(|t| t.into_data())
                    .unwrap_or_else(|| vec![0.0; adapter.tensors()[*name].numel()]);
                named.push((name.to_string(), g));
            }
        }
        let mut slices: Vec<&mut [f64]> = named.iter_mut().map(|(_, g)| g.as_mut_slice()).collect();
        let grad_norm = clip_gradients(&mut slices, self.cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(TrainError::Loss(LossError::Tensor(TensorError::NonFinite { op: "gradient" })));
        }

        let lr = warmup_lr(self.cfg.lr, self.cfg.warmup_steps, step);
        self.adam.begin_step();
        let grads_by_name: std::collections::BTreeMap<&str, &[f64]> =
            named.iter().map(|(n, g)| (n.as_str(), g.as_slice())).collect();
        let adam = &mut self.adam;
        self.student.update_trainable(|name, values| {
            adam.update(name, values, grads_by_name[name], lr);
            for x in values.iter_mut() {
                *x = *x as f32 as f64;
            }
        });
        if let Some(adapter) = &mut self.adapter {
            for (name, t) in adapter.tensors_mut() {
                let values = t.data_mut();
                adam.update(name, values, grads_by_name[name.as_str()], lr);
                for x in values.iter_mut() {
                    *x = *x as f32 as f64;
                }
            }
        }
        Ok(StepValues {
            rec: rec_v,
            contrast: contrast_v,
            kd: kd_v,
            total: total_v,
            grad_norm,
        })
    }
}

/// Mini-batch indices and slot noise, drawn from separate seeded streams so that
/// runs differing only in their objective see the same data and noise.
struct Sampler {
    order_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(seed: u64, videos: usize) -> Self {
        let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
        order_rng.set_stream(1);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(2);
        Self {
            order_rng,
            noise_rng,
            order: (0..videos).collect(),
            cursor: videos,
        }
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.order_rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    fn noise(&mut self, cfg: &ModelConfig, count: usize) -> Vec<Tensor> {
        (0..count).map(|_| slot_noise(cfg, &mut self.noise_rng)).collect()
    }
}

fn adapter_seed(seed: u64) -> u64 {
    seed ^ 0xada9_7e55
}

/// Shared loop for teacher pretraining and distillation.
fn run_loop(mut run: Run<'_>, label: &str, probe_set: Option<(&[usize], &[Tensor])>) -> Result<Trained> {
    let cfg = run.cfg;
    let mut record = RunRecord {
        seed: cfg.seed,
        label: label.to_string(),
        beta: if run.variant == KdVariant::None { 0.0 } else { run.losses.beta },
        param_count: run.student.param_count().total(),
        ..RunRecord::default()
    };
    let mut sampler = Sampler::new(cfg.seed, run.videos);
    let student_cfg = run.student.config().clone();

    let probe = |run: &Run<'_>, step: usize, record: &mut RunRecord| -> Result<()> {
        let (Some((videos, student_cache)), Some(teacher)) = (probe_set, &run.teacher) else {
            return Ok(());
        };
        let t = probe_slots(teacher.weights, teacher.cache, run.frames, videos)?;
        let s = probe_slots(&run.student, student_cache, run.frames, videos)?;
        let decoder = SlotDecoder::from_weights(teacher.weights)?;
        let report = verify_theorem(&t, &s, &decoder, BoundMode::Equalized)?;
        record.probes.push(BoundProbe {
            step,
            mean_c: report.mean_c(),
            mean_lhs: report.mean_lhs(),
            violations: report.violations(),
        });
        Ok(())
    };

    for step in 0..cfg.steps {
        let started = Instant::now();
        let batch = sampler.batch(cfg.batch_size);
        let noises = sampler.noise(&student_cfg, batch.len());
        match run.step(step, &batch, &noises) {
            Ok(v) => record.steps.push(StepLog {
                step,
                rec: v.rec,
                contrast: v.contrast,
                kd: v.kd,
                total: v.total,
                grad_norm: v.grad_norm,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            }),
            Err(e) => {
                return match divergence_reason(&e) {
                    Some(reason) => {
                        record.diverged = Some(reason.clone());
                        Err(TrainError::Diverged {
                            step,
                            reason,
                            record: Box::new(record),
                        })
                    }
                    None => Err(e),
                }
            }
        }
        let done = step + 1;
        if cfg.probe_every > 0 && (done % cfg.probe_every == 0 || done == cfg.steps) {
            probe(&run, done, &mut record)?;
        }
    }
    Ok(Trained {
        weights: run.student,
        adapter: run.adapter,
        record,
    })
}

fn check_data(data: &VideoBatch, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.batch == 0 || data.frames == 0 {
        return Err(TrainError::Config("training data is empty".into()));
    }
    Ok(())
}

/// Train a model from scratch on `rec + alpha·contrast` (no distillation).
pub fn train_teacher(model: &ModelConfig, cfg: &TrainConfig, losses: &LossWeights, data: &VideoBatch) -> Result<Trained> {
    check_data(data, cfg)?;
    losses.validate()?;
    let weights = ModelWeights::init(model, cfg.seed)?;
    let cache = frozen_features(&weights, data)?;
    train_from(weights, &cache, data.frames, None, cfg, losses, "teacher")
}

/// Distill a frozen `teacher` into a freshly initialized student.
pub fn distill(
    teacher: &ModelWeights,
    student: &ModelConfig,
    cfg: &TrainConfig,
    losses: &LossWeights,
    data: &VideoBatch,
) -> Result<Trained> {
    check_data(data, cfg)?;
    let weights = ModelWeights::init(student, cfg.seed)?;
    let teacher_cache = frozen_features(teacher, data)?;
    let student_cache = frozen_features(&weights, data)?;
    distill_from(teacher, &teacher_cache, weights, &student_cache, data.frames, cfg, losses)
}

/// Distillation with precomputed frozen features for both models, starting from
/// the given student weights.
pub fn distill_from(
    teacher: &ModelWeights,
    teacher_cache: &[Tensor],
    student: ModelWeights,
    student_cache: &[Tensor],
    frames: usize,
    cfg: &TrainConfig,
    losses: &LossWeights,
) -> Result<Trained> {
    let (t, s) = (teacher.config(), student.config());
    if t.num_slots != s.num_slots || t.slot_dim != s.slot_dim {
        return Err(TrainError::Config(format!(
            "teacher has {} slots of width {}, student has {} of width {}",
            t.num_slots, t.slot_dim, s.num_slots, s.slot_dim
        )));
    }
    if teacher_cache.len() != student_cache.len() {
        return Err(TrainError::Config("teacher and student feature caches differ in length".into()));
    }
    train_from(
        student,
        student_cache,
        frames,
        Some(TeacherContext {
            weights: teacher,
            cache: teacher_cache,
        }),
        cfg,
        losses,
        cfg.kd_variant.name(),
    )
}

fn train_from(
    student: ModelWeights,
    cache: &[Tensor],
    frames: usize,
    teacher: Option<TeacherContext<'_>>,
    cfg: &TrainConfig,
    losses: &LossWeights,
    label: &str,
) -> Result<Trained> {
    cfg.validate()?;
    losses.validate()?;
    if frames == 0 || cache.is_empty() || cache.len() % frames != 0 {
        return Err(TrainError::Config("feature cache does not hold whole videos".into()));
    }
    let videos = cache.len() / frames;
    let variant = if teacher.is_some() { cfg.kd_variant } else { KdVariant::None };
    let adapter = match &teacher {
        Some(t) if variant.uses_adapter() => Some(Adapter::init(
            t.weights.config().feature_dim,
            student.config().feature_dim,
            adapter_seed(cfg.seed),
        )),
        _ => None,
    };
    let probe_videos: Vec<usize> = (0..cfg.probe_videos.min(videos)).collect();
    let run = Run {
        student,
        adapter,
        cache,
        frames,
        videos,
        teacher,
        cfg,
        losses: *losses,
        variant,
        adam: Adam::default(),
    };
    let probe_set = (!probe_videos.is_empty()).then_some((probe_videos.as_slice(), cache));
    run_loop(run, label, probe_set)
}
