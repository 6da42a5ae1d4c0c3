//! The pre-training loop: keyed data order, learning-rate and momentum
//! schedules, AdamW with gradient clipping, EMA teacher updates, periodic
//! checkpointing, and JSON-line logging.
//!
//! Every stochastic draw is keyed by `(seed, purpose, epoch, index)`, so a
//! run checkpointed at step s and resumed continues exactly as if it had
//! never stopped. The step budget is epochs times batches per epoch rather
//! than a fixed absolute count, so corpora of any size scale naturally.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{
    manifest_stats, normalize, sample_mask, sample_multicrop, CropPolicy, IntensityStats,
    MaskPolicy,
};
use crate::encoder::{BoundEncoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::formats::checkpoint::{Checkpoint, CENTER_IMAGE, CENTER_PATCH};
use crate::formats::manifest::{Manifest, Split};
use crate::formats::pnm::read_pgm;
use crate::numerics::{
    adamw_step, clip_global_norm, AdamHyper, AdamState, CosineSchedule, Real, Tape, Tensor,
};
use crate::rng;
use crate::ssl::{ema_update, LossWeights, TeacherState, EMA_MOMENTUM_START};

/// Desk-scale defaults; the paper-scale values sit in the doc comments of
/// [`TrainConfig::desk_default`].
pub const DESK_BATCH: usize = 32;
pub const DESK_EPOCHS: usize = 100;
pub const BASE_LR: f64 = 1e-3;
pub const FINAL_LR: f64 = 1e-6;
pub const WARMUP_FRAC: f64 = 0.03;
pub const WEIGHT_DECAY: f32 = 0.04;
pub const CLIP_NORM: f32 = 3.0;

/// Where the student's starting weights come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InitMode {
    Random,
    /// Continual pre-training: the checkpoint's teacher branch becomes the
    /// new student and teacher; optimizer, centers, and step start fresh.
    FromCheckpoint(PathBuf),
    /// Continue an interrupted run with optimizer, centers, teacher, and
    /// step restored. Seed and architecture must match the checkpoint.
    Resume(PathBuf),
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub encoder: EncoderConfig,
    pub crops: CropPolicy,
    pub masking: MaskPolicy,
    /// At least 2: the spread regularizer needs pairs of rows.
    pub batch: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f32,
    pub clip_norm: f32,
    pub ema_start: f64,
    pub ema_end: f64,
    pub seed: u64,
    pub init: InitMode,
    /// Disables masked patch prediction: its weight is exactly zero and the
    /// logged patch loss is exactly zero at every step.
    pub no_mim: bool,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    /// A checkpoint is written every this many steps and at the end.
    pub checkpoint_interval: u64,
    /// Halt after this many completed steps while keeping every schedule on
    /// the full budget. Supports resumption tests and operational stops.
    pub stop_after: Option<u64>,
}

impl TrainConfig {
    /// Desk-scale run: batch 32 against the reference batch 640, 100 epochs,
    /// base learning rate 1e-3 with 3% warmup, EMA momentum 0.992 to 1.0.
    pub fn desk_default(manifest: PathBuf, out_dir: &Path) -> TrainConfig {
        let encoder = EncoderConfig::desk_default();
        TrainConfig {
            manifest,
            encoder,
            crops: CropPolicy::for_resolution(encoder.image_side, encoder.patch_side),
            masking: MaskPolicy::desk_default(),
            batch: DESK_BATCH,
            epochs: DESK_EPOCHS,
            base_lr: BASE_LR,
            final_lr: FINAL_LR,
            warmup_frac: WARMUP_FRAC,
            weight_decay: WEIGHT_DECAY,
            clip_norm: CLIP_NORM,
            ema_start: EMA_MOMENTUM_START,
            ema_end: 1.0,
            seed: 0,
            init: InitMode::Random,
            no_mim: false,
            checkpoint_path: out_dir.join("checkpoint.rdwb"),
            log_path: out_dir.join("train_log.jsonl"),
            checkpoint_interval: 200,
            stop_after: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.crops.validate(self.encoder.patch_side)?;
        self.masking.validate()?;
        if self.crops.global_out != self.encoder.image_side {
            return Err(Error::Config(format!(
                "global crop side {} does not match encoder resolution {}",
                self.crops.global_out, self.encoder.image_side
            )));
        }
        if self.batch < 2 {
            return Err(Error::Config(format!(
                "batch {} is too small: the spread regularizer needs pairs",
                self.batch
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.final_lr > 0.0 && self.final_lr <= self.base_lr) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 < final {} <= base {}",
                self.final_lr, self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_frac
            )));
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config(
                "weight decay must be nonnegative and clip norm positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_start)
            || !(0.0..=1.0).contains(&self.ema_end)
            || self.ema_start > self.ema_end
        {
            return Err(Error::Config(format!(
                "EMA momentum bounds [{}, {}] must satisfy 0 <= start <= end <= 1",
                self.ema_start, self.ema_end
            )));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Batches per epoch: full batches plus the trailing remainder, except that
/// a remainder of one sample is dropped because the spread regularizer
/// cannot run on a single row.
pub fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    (n / batch + usize::from(n % batch >= 2)) as u64
}

/// One log line per completed step. `step` counts completed steps, 1-based;
/// `lr` and `ema_momentum` are the values used at that step. Wall time is
/// seconds since the run (or resumption) started and is the one field
/// exempt from reproducibility comparisons.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub lr: f64,
    pub ema_momentum: f64,
    pub teacher_temp: f32,
    pub dino: f32,
    pub ibot: f32,
    pub koleo: f32,
    pub total: f32,
    pub teacher_entropy: f32,
    pub wall_time_s: f64,
}

impl TrainLogRecord {
    pub fn ensure_finite(&self) -> Result<()> {
        let fields = [
            ("lr", self.lr),
            ("ema_momentum", self.ema_momentum),
            ("teacher_temp", self.teacher_temp as f64),
            ("dino", self.dino as f64),
            ("ibot", self.ibot as f64),
            ("koleo", self.koleo as f64),
            ("total", self.total as f64),
            ("teacher_entropy", self.teacher_entropy as f64),
            ("wall_time_s", self.wall_time_s),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "log record at step {} has non-finite {name}: {v}",
                    self.step
                )));
            }
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    /// Records of the steps this call executed (resumption returns only the
    /// continuation's records; earlier ones are already in the log file).
    pub records: Vec<TrainLogRecord>,
    pub total_steps: u64,
}

/// Collapse diagnostics over a batch of probability rows: mean Shannon
/// entropy in nats and mean KL divergence to the uniform distribution,
/// which is ln K minus the entropy.
#[derive(Clone, Copy, Debug)]
pub struct CollapseMetrics {
    pub mean_entropy: f64,
    pub kl_uniform: f64,
}

pub fn collapse_metrics<T: Real>(probs: &Tensor<T>) -> Result<CollapseMetrics> {
    let (rows, k) = probs.dims2()?;
    if rows == 0 || k == 0 {
        return Err(Error::Shape("collapse metrics need a nonempty batch".into()));
    }
    let mut entropy_sum = 0.0;
    for row in probs.data().chunks_exact(k) {
        let mut sum = 0.0;
        for &p in row {
            let p = p.as_f64();
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::Numeric(format!("invalid probability {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Numeric(format!("row sums to {sum}, not 1")));
        }
        entropy_sum += crate::numerics::entropy(row).as_f64();
    }
    let mean_entropy = entropy_sum / rows as f64;
    Ok(CollapseMetrics {
        mean_entropy,
        kl_uniform: (k as f64).ln() - mean_entropy,
    })
}

struct RunState {
    student: EncoderParams<f32>,
    teacher: TeacherState,
    opt: BTreeMap<String, AdamState<f32>>,
    start_step: u64,
}

fn fresh_opt(params: &EncoderParams<f32>) -> BTreeMap<String, AdamState<f32>> {
    params
        .iter()
        .map(|(name, t)| (name.clone(), AdamState::new(t.data().len())))
        .collect()
}

fn init_run(cfg: &TrainConfig, total_steps: u64) -> Result<RunState> {
    let build_state = |student: &EncoderParams<f32>| -> Result<TeacherState> {
        let mut state = TeacherState::new(student, &cfg.encoder, total_steps)?;
        state.ema_momentum = CosineSchedule::new(cfg.ema_start, cfg.ema_end, 0, total_steps)?;
        Ok(state)
    };
    match &cfg.init {
        InitMode::Random => {
            let student = EncoderParams::init(&cfg.encoder, cfg.seed)?;
            let teacher = build_state(&student)?;
            let opt = fresh_opt(&student);
            Ok(RunState { student, teacher, opt, start_step: 0 })
        }
        InitMode::FromCheckpoint(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != cfg.encoder {
                return Err(Error::Config(format!(
                    "checkpoint architecture {:?} does not match the configured encoder",
                    ckpt.config
                )));
            }
            // The teacher branch is the distilled encoder, so continual
            // pre-training starts both branches from it.
            let student = ckpt.teacher()?;
            let teacher = build_state(&student)?;
            let opt = fresh_opt(&student);
            Ok(RunState { student, teacher, opt, start_step: 0 })
        }
        InitMode::Resume(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != cfg.encoder {
                return Err(Error::Config(
                    "cannot resume with a different encoder architecture".into(),
                ));
            }
            if ckpt.seed != cfg.seed {
                return Err(Error::Config(format!(
                    "cannot resume with seed {} a run recorded under seed {}",
                    cfg.seed, ckpt.seed
                )));
            }
            if ckpt.step > total_steps {
                return Err(Error::Config(format!(
                    "checkpoint is at step {} but this run totals {total_steps}",
                    ckpt.step
                )));
            }
            let student = ckpt.student()?;
            let mut teacher = build_state(&student)?;
            teacher.params = ckpt.teacher()?;
            teacher.image_center = ckpt.center(CENTER_IMAGE)?.data().to_vec();
            teacher.patch_center = ckpt.center(CENTER_PATCH)?.data().to_vec();
            // The restored centers already hold running means; a second
            // warm start would overwrite them and fork the continuation.
            teacher.image_center_warm = true;
            teacher.patch_center_warm = true;
            let mut opt = BTreeMap::new();
            for (name, t) in student.iter() {
                let m = ckpt.tensors[&format!("opt.m.{name}")].data().to_vec();
                let v = ckpt.tensors[&format!("opt.v.{name}")].data().to_vec();
                debug_assert_eq!(m.len(), t.data().len());
                opt.insert(name.clone(), AdamState { m, v });
            }
            Ok(RunState { student, teacher, opt, start_step: ckpt.step })
        }
    }
}

fn write_checkpoint(
    cfg: &TrainConfig,
    run: &RunState,
    stats: IntensityStats,
    completed: u64,
) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for (name, t) in run.student.iter() {
        tensors.insert(format!("student.{name}"), t.clone());
        let opt = &run.opt[name];
        tensors.insert(format!("opt.m.{name}"), Tensor::from_vec(t.shape(), opt.m.clone())?);
        tensors.insert(format!("opt.v.{name}"), Tensor::from_vec(t.shape(), opt.v.clone())?);
    }
    for (name, t) in run.teacher.params.iter() {
        tensors.insert(format!("teacher.{name}"), t.clone());
    }
    let k = cfg.encoder.prototypes;
    tensors.insert(
        CENTER_IMAGE.to_string(),
        Tensor::from_vec(&[k], run.teacher.image_center.clone())?,
    );
    tensors.insert(
        CENTER_PATCH.to_string(),
        Tensor::from_vec(&[k], run.teacher.patch_center.clone())?,
    );
    Checkpoint {
        config: cfg.encoder,
        stats,
        step: completed,
        seed: cfg.seed,
        tensors,
    }
    .save(&cfg.checkpoint_path)
}

/// Run pre-training to the configured budget (or `stop_after`), writing the
/// log stream and checkpoints as it goes. A non-finite loss or gradient
/// aborts with an error after appending a diagnostic line to the log.
pub fn pretrain(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (manifest, root) = Manifest::load(&cfg.manifest)?;
    let rows = manifest.split_rows(Split::Train);
    let n = rows.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "training split has {n} images; need at least one pair"
        )));
    }
    let per_epoch = steps_per_epoch(n, cfg.batch);
    let total_steps = cfg.epochs as u64 * per_epoch;
    let stats = manifest_stats(&manifest, &root, Split::Train)?.stats;

    let mut run = init_run(cfg, total_steps)?;
    let lr_schedule = CosineSchedule::new(
        cfg.base_lr,
        cfg.final_lr,
        (total_steps as f64 * cfg.warmup_frac).round() as u64,
        total_steps,
    )?;
    let weights = if cfg.no_mim { LossWeights::no_mim() } else { LossWeights::desk_default() };
    let n_tokens = (cfg.crops.global_out / cfg.encoder.patch_side).pow(2);

    if let Some(dir) = cfg.checkpoint_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    if let Some(dir) = cfg.log_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let log_file = OpenOptions::new()
        .create(true)
        .append(run.start_step > 0)
        .truncate(run.start_step == 0)
        .write(true)
        .open(&cfg.log_path)?;
    let mut log = BufWriter::new(log_file);

    let end_step = cfg
        .stop_after
        .map_or(total_steps, |s| s.min(total_steps))
        .max(run.start_step);
    let started = Instant::now();
    let mut records = Vec::new();
    let mut epoch_order: Option<(u64, Vec<usize>)> = None;
    let mut last_saved = if run.start_step > 0 { Some(run.start_step) } else { None };

    for step in run.start_step..end_step {
        let epoch = step / per_epoch;
        let slot = (step % per_epoch) as usize;
        if epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            epoch_order = Some((epoch, rng::permutation(n, cfg.seed, "train/order", epoch)));
        }
        let order = &epoch_order.as_ref().unwrap().1;
        let lo = slot * cfg.batch;
        let hi = (lo + cfg.batch).min(n);

        let mut crops = Vec::with_capacity(hi - lo);
        let mut masks = vec![Vec::new(); cfg.crops.global_count];
        for (pos, &sample) in order[lo..hi].iter().enumerate() {
            let image = read_pgm(&root.join(&rows[sample].image))?;
            let draw = (lo + pos) as u64;
            let mut set = sample_multicrop(
                &image,
                &cfg.crops,
                &mut rng::stream(cfg.seed, "train/crop", epoch, draw),
            )?;
            // Views are normalized after cropping: the jitter and blur in
            // the pipeline assume raw [0, 1] intensities.
            for view in set.globals.iter_mut().chain(set.locals.iter_mut()) {
                normalize(view, &stats);
            }
            crops.push(set);
            for (view, mask) in masks.iter_mut().enumerate() {
                if cfg.no_mim {
                    mask.extend(std::iter::repeat(false).take(n_tokens));
                } else {
                    mask.extend(sample_mask(
                        n_tokens,
                        &cfg.masking,
                        &mut rng::stream(cfg.seed, "train/mask", epoch, draw * 2 + view as u64),
                    ));
                }
            }
        }

        let step_result = (|| -> Result<TrainLogRecord> {
            let mut tape = Tape::<f32>::new();
            let bound = BoundEncoder::bind(&mut tape, &run.student, &cfg.encoder, true)?;
            let (total_var, breakdown) =
                run.teacher
                    .total_loss(&mut tape, &bound, &crops, &masks, step, &weights)?;
            let grads = tape.backward_scalar(total_var);
            let mut grad_bufs: Vec<(&String, Vec<f32>)> = Vec::new();
            for (name, &var) in bound.vars() {
                if let Some(g) = grads.get(var) {
                    grad_bufs.push((name, g.to_vec()));
                }
            }
            let mut views: Vec<&mut [f32]> =
                grad_bufs.iter_mut().map(|(_, g)| g.as_mut_slice()).collect();
            clip_global_norm(&mut views, cfg.clip_norm);
            let lr = lr_schedule.at(step)?;
            let hyper = AdamHyper::with_decay(lr as f32, cfg.weight_decay);
            for (name, g) in &grad_bufs {
                adamw_step(
                    run.student.get_mut(name).data_mut(),
                    g,
                    run.opt.get_mut(*name).unwrap(),
                    &hyper,
                    step + 1,
                )?;
            }
            run.student.renorm_prototypes();
            let momentum = run.teacher.ema_momentum.at(step)?;
            ema_update(&mut run.teacher.params, &run.student, momentum as f32)?;
            let record = TrainLogRecord {
                step: step + 1,
                lr,
                ema_momentum: momentum,
                teacher_temp: breakdown.teacher_temp,
                dino: breakdown.dino,
                ibot: breakdown.ibot,
                koleo: breakdown.koleo,
                total: breakdown.total,
                teacher_entropy: breakdown.teacher_entropy,
                wall_time_s: started.elapsed().as_secs_f64(),
            };
            record.ensure_finite()?;
            Ok(record)
        })();
        let record = match step_result {
            Ok(record) => record,
            Err(err) => {
                let diagnostic = serde_json::json!({
                    "step": step + 1,
                    "abort": err.to_string(),
                });
                writeln!(log, "{diagnostic}")?;
                log.flush()?;
                return Err(err);
            }
        };
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        records.push(record);

        let completed = step + 1;
        if completed % cfg.checkpoint_interval == 0 || completed == end_step {
            write_checkpoint(cfg, &run, stats, completed)?;
            last_saved = Some(completed);
            log.flush()?;
        }
    }
    if last_saved != Some(end_step) {
        write_checkpoint(cfg, &run, stats, end_step)?;
    }
    log.flush()?;
    Ok(TrainOutcome {
        checkpoint: cfg.checkpoint_path.clone(),
        records,
        total_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder;
    use crate::synthcxr::{generate, GenerateConfig};

    fn tiny_encoder(image_side: usize) -> EncoderConfig {
        EncoderConfig {
            image_side,
            patch_side: 8,
            dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            prototypes: 16,
            bottleneck: 8,
            share_heads: false,
        }
    }

    fn tiny_corpus(dir: &Path, side: usize, images: usize) -> PathBuf {
        let cfg = GenerateConfig {
            images,
            side,
            seed: 1,
            max_per_subject: 2,
            ..GenerateConfig::desk_default()
        };
        generate(&cfg, dir).unwrap();
        dir.join("manifest.csv")
    }

    fn tiny_train_cfg(dir: &Path, manifest: PathBuf, image_side: usize) -> TrainConfig {
        let encoder = tiny_encoder(image_side);
        let mut crops = CropPolicy::for_resolution(encoder.image_side, encoder.patch_side);
        crops.local_count = 2;
        TrainConfig {
            manifest,
            encoder,
            crops,
            masking: MaskPolicy::desk_default(),
            batch: 4,
            epochs: 2,
            base_lr: 1e-3,
            final_lr: 1e-5,
            warmup_frac: 0.03,
            weight_decay: WEIGHT_DECAY,
            clip_norm: CLIP_NORM,
            ema_start: EMA_MOMENTUM_START,
            ema_end: 1.0,
            seed: 3,
            init: InitMode::Random,
            no_mim: false,
            checkpoint_path: dir.join("ckpt.rdwb"),
            log_path: dir.join("log.jsonl"),
            checkpoint_interval: 100,
            stop_after: None,
        }
    }

    #[test]
    fn steps_per_epoch_drops_trailing_singleton() {
        assert_eq!(steps_per_epoch(8, 4), 2);
        assert_eq!(steps_per_epoch(10, 4), 3);
        // A remainder of one sample cannot form a training batch.
        assert_eq!(steps_per_epoch(9, 4), 2);
        assert_eq!(steps_per_epoch(3, 8), 1);
        assert_eq!(steps_per_epoch(2, 32), 1);
    }

    #[test]
    fn collapse_metrics_worked_examples() {
        let uniform = Tensor::from_vec(&[2, 4], vec![0.25f64; 8]).unwrap();
        let m = collapse_metrics(&uniform).unwrap();
        assert!((m.mean_entropy - 4.0f64.ln()).abs() < 1e-12);
        assert!(m.kl_uniform.abs() < 1e-12);

        let one_hot = Tensor::from_vec(&[1, 4], vec![1.0f64, 0.0, 0.0, 0.0]).unwrap();
        let m = collapse_metrics(&one_hot).unwrap();
        assert_eq!(m.mean_entropy, 0.0);
        assert!((m.kl_uniform - 4.0f64.ln()).abs() < 1e-12);

        let skewed = Tensor::from_vec(&[1, 4], vec![0.7f64, 0.1, 0.1, 0.1]).unwrap();
        let m = collapse_metrics(&skewed).unwrap();
        assert!((m.mean_entropy - 0.9404).abs() < 1e-4);

        let negative = Tensor::from_vec(&[1, 2], vec![1.5f64, -0.5]).unwrap();
        assert!(collapse_metrics(&negative).is_err());
        let not_normalized = Tensor::from_vec(&[1, 2], vec![0.6f64, 0.6]).unwrap();
        assert!(collapse_metrics(&not_normalized).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train_cfg(dir.path(), dir.path().join("manifest.csv"), 32);
        assert!(cfg.validate().is_ok());
        for mutate in [
            (&|c: &mut TrainConfig| c.batch = 1) as &dyn Fn(&mut TrainConfig),
            &|c| c.epochs = 0,
            &|c| c.warmup_frac = 1.0,
            &|c| c.final_lr = 2e-3,
            &|c| c.ema_start = 1.1,
            &|c| c.checkpoint_interval = 0,
            &|c| c.crops.global_out = 64,
        ] {
            let mut bad = cfg.clone();
            mutate(&mut bad);
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_corpus(&dir.path().join("corpus"), 32, 10);

        let full_dir = dir.path().join("full");
        std::fs::create_dir_all(&full_dir).unwrap();
        let full_cfg = tiny_train_cfg(&full_dir, manifest.clone(), 32);
        let full = pretrain(&full_cfg).unwrap();
        assert!(full.total_steps >= 4);

        let half = full.total_steps / 2;
        let part_dir = dir.path().join("part");
        std::fs::create_dir_all(&part_dir).unwrap();
        let mut first_cfg = tiny_train_cfg(&part_dir, manifest, 32);
        first_cfg.stop_after = Some(half);
        let first = pretrain(&first_cfg).unwrap();
        assert_eq!(first.records.len() as u64, half);

        let mut resume_cfg = first_cfg.clone();
        resume_cfg.stop_after = None;
        resume_cfg.init = InitMode::Resume(first_cfg.checkpoint_path.clone());
        let second = pretrain(&resume_cfg).unwrap();
        assert_eq!(second.records.len() as u64, full.total_steps - half);

        let stitched: Vec<&TrainLogRecord> =
            first.records.iter().chain(second.records.iter()).collect();
        assert_eq!(stitched.len(), full.records.len());
        for (a, b) in stitched.iter().zip(&full.records) {
            assert_eq!(a.step, b.step);
            assert!((a.lr - b.lr).abs() <= 1e-6);
            assert!((a.ema_momentum - b.ema_momentum).abs() <= 1e-6);
            assert!((a.teacher_temp - b.teacher_temp).abs() <= 1e-6);
            assert!((a.dino - b.dino).abs() <= 1e-6);
            assert!((a.ibot - b.ibot).abs() <= 1e-6);
            assert!((a.koleo - b.koleo).abs() <= 1e-6);
            assert!((a.total - b.total).abs() <= 1e-6);
            assert!((a.teacher_entropy - b.teacher_entropy).abs() <= 1e-6);
        }
        // One implementation, one seed: final parameters are bitwise equal,
        // so the checkpoint files match byte for byte.
        let full_bytes = std::fs::read(&full_cfg.checkpoint_path).unwrap();
        let resumed_bytes = std::fs::read(&resume_cfg.checkpoint_path).unwrap();
        assert_eq!(full_bytes, resumed_bytes);

        // The appended log holds one JSON line per step of the full budget.
        let log = std::fs::read_to_string(&resume_cfg.log_path).unwrap();
        assert_eq!(log.lines().count() as u64, full.total_steps);
    }

    #[test]
    fn no_mim_logs_zero_patch_loss_at_every_step() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_corpus(&dir.path().join("corpus"), 32, 10);
        let mut cfg = tiny_train_cfg(dir.path(), manifest, 32);
        cfg.no_mim = true;
        cfg.epochs = 1;
        let outcome = pretrain(&cfg).unwrap();
        assert!(!outcome.records.is_empty());
        for record in &outcome.records {
            assert_eq!(record.ibot, 0.0);
            record.ensure_finite().unwrap();
        }
    }

    #[test]
    fn logged_traces_equal_schedules_pointwise() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_corpus(&dir.path().join("corpus"), 32, 10);
        let mut cfg = tiny_train_cfg(dir.path(), manifest, 32);
        cfg.epochs = 2;
        let outcome = pretrain(&cfg).unwrap();

        let total = outcome.total_steps;
        let lr = CosineSchedule::new(
            cfg.base_lr,
            cfg.final_lr,
            (total as f64 * cfg.warmup_frac).round() as u64,
            total,
        )
        .unwrap();
        let ema = CosineSchedule::new(cfg.ema_start, cfg.ema_end, 0, total).unwrap();
        assert_eq!(outcome.records.len() as u64, total);
        for (i, record) in outcome.records.iter().enumerate() {
            let step = i as u64;
            assert_eq!(record.step, step + 1);
            assert_eq!(record.lr, lr.at(step).unwrap());
            assert_eq!(record.ema_momentum, ema.at(step).unwrap());
        }
    }

    #[test]
    fn reload_and_reembed_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_corpus(&dir.path().join("corpus"), 32, 10);
        let mut cfg = tiny_train_cfg(dir.path(), manifest, 32);
        cfg.stop_after = Some(2);
        pretrain(&cfg).unwrap();

        let probe = {
            let mut stream = rng::stream(77, "trainer/test", 0, 0);
            let scene = crate::synthcxr::sample_scene(
                "probe",
                crate::synthcxr::ScaleClass::Medium,
                1.0,
                crate::synthcxr::Findings { blob: true, tube: false, pneumo: false },
                &mut stream,
            );
            crate::synthcxr::render(&scene, 32).unwrap().image
        };
        let embed_once = || {
            let ckpt = Checkpoint::load(&cfg.checkpoint_path).unwrap();
            let params = ckpt.teacher().unwrap();
            let mut img = probe.clone();
            normalize(&mut img, &ckpt.stats);
            encoder::encode(&params, &ckpt.config, &img, None, false)
                .unwrap()
                .cls
        };
        let a = embed_once();
        let b = embed_once();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn from_checkpoint_init_restarts_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_corpus(&dir.path().join("corpus"), 32, 10);
        let mut cfg = tiny_train_cfg(dir.path(), manifest.clone(), 32);
        cfg.stop_after = Some(2);
        pretrain(&cfg).unwrap();

        let cont_dir = dir.path().join("continual");
        std::fs::create_dir_all(&cont_dir).unwrap();
        let mut cont = tiny_train_cfg(&cont_dir, manifest, 32);
        cont.init = InitMode::FromCheckpoint(cfg.checkpoint_path.clone());
        cont.seed = 9;
        cont.stop_after = Some(2);
        let outcome = pretrain(&cont).unwrap();
        // A fresh run, not a continuation: steps restart from one.
        assert_eq!(outcome.records[0].step, 1);

        // The new student starts from the source checkpoint's teacher.
        let source = Checkpoint::load(&cfg.checkpoint_path).unwrap();
        let run = init_run(&cont, 10).unwrap();
        let teacher = source.teacher().unwrap();
        for (name, t) in run.student.iter() {
            assert_eq!(t.data(), teacher.get(name).data());
        }
    }

    #[test]
    fn toy_run_loss_decreases_across_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_corpus(&dir.path().join("corpus"), 64, 16);
        for seed in [0u64, 1, 2] {
            let run_dir = dir.path().join(format!("seed{seed}"));
            std::fs::create_dir_all(&run_dir).unwrap();
            let mut cfg = tiny_train_cfg(&run_dir, manifest.clone(), 64);
            cfg.seed = seed;
            cfg.stop_after = Some(200);
            cfg.epochs = 100;
            let outcome = pretrain(&cfg).unwrap();
            assert_eq!(outcome.records.len(), 200);
            for record in &outcome.records {
                record.ensure_finite().unwrap();
            }
            let early: f32 =
                outcome.records[..10].iter().map(|r| r.total).sum::<f32>() / 10.0;
            let last = outcome.records[199].total;
            assert!(
                last < early,
                "seed {seed}: step-200 loss {last} not below early mean {early}"
            );
        }
    }
}
