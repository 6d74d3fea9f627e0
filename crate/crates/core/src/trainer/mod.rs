//! Pretraining driver: batch composition under a fixed audio budget, the
//! teacher/student step, checkpoints and the ablation grid.
//!
//! Every random draw (crop offsets, shuffles, masks, dropout) is derived from
//! `(seed, step, slot)`, so the step counter is the whole RNG state and a
//! resumed run replays the uninterrupted one exactly. Per-clip gradients are
//! reduced in clip order, which makes results independent of thread count.

mod checkpoint;
mod grid;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{crop_excerpt, crop_len, normalize_samples, AudioError, CropPolicy, Excerpt, Waveform};
use crate::derive_seed;
use crate::distiller::{build_targets, distill_loss_graph, tau_schedule, DistillError, DistillState, EmaConfig, TargetConfig};
use crate::encoder::{encode, forward, EncoderConfig, EncoderError};
use crate::masking::{sample_mask, MaskConfig, MaskError};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, NumericsError, ParamStore, Tensor};

pub use checkpoint::{param_fingerprint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use grid::{config_diff, make_ablation_grid, GridEntry};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_CROP: u64 = 3;
const STREAM_MASK: u64 = 4;
const STREAM_DROPOUT: u64 = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(
        "non-finite training state at step {step}: loss {loss}, lr {lr}, grad norm {grad_norm}; {detail}"
    )]
    NonFinite { step: u64, loss: f64, lr: f64, grad_norm: f64, detail: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub crop_seconds: f64,
    pub batch_audio_budget_seconds: f64,
    pub total_steps: u64,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub mask: MaskConfig,
    pub target: TargetConfig,
    pub ema: EmaConfig,
    pub encoder: EncoderConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    /// Desk scale: 3 s crops, 60 s of audio per batch, 2000 steps.
    fn default() -> Self {
        TrainConfig {
            crop_seconds: 3.0,
            batch_audio_budget_seconds: 60.0,
            total_steps: 2000,
            lr: 2e-3,
            warmup_fraction: 0.05,
            seed: 0,
            checkpoint_every: 500,
            mask: MaskConfig::default(),
            target: TargetConfig { top_k: 1, ..TargetConfig::default() },
            ema: EmaConfig::default(),
            encoder: EncoderConfig::desk(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.encoder.validate()?;
        let crop = crop_len(self.crop_seconds, self.encoder.sample_rate)?;
        if !(self.batch_audio_budget_seconds >= self.crop_seconds) {
            return bad(format!(
                "batch_audio_budget_seconds {} is below crop_seconds {}",
                self.batch_audio_budget_seconds, self.crop_seconds
            ));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction));
        }
        self.mask.validate()?;
        self.target.validate(self.encoder.layers)?;
        self.ema.validate()?;
        let frames = self.encoder.output_length(crop)?;
        if frames < self.mask.span_length {
            return bad(format!("a crop yields {frames} frames, fewer than span_length {}", self.mask.span_length));
        }
        Ok(())
    }

    /// `⌊budget / crop⌋`.
    pub fn batch_size(&self) -> usize {
        (self.batch_audio_budget_seconds / self.crop_seconds + 1e-9).floor() as usize
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64 - 1e-9).ceil().max(0.0) as u64
    }

    /// Learning rate of 1-based step `step`: linear warmup to `lr`, then
    /// linear decay that would reach zero one step after the last.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps();
        if step <= w {
            return self.lr * step as f64 / w as f64;
        }
        let peak = w.max(1);
        if step <= peak {
            return self.lr;
        }
        let total = self.total_steps.max(step);
        self.lr * (total + 1 - step) as f64 / (total + 1 - peak) as f64
    }
}

/// Clip order of epoch `epoch`.
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SHUFFLE, epoch])));
    order
}

/// Excerpts of 0-based step `step`: slots `step·B .. (step+1)·B` of a stream
/// that walks a fresh shuffle of the clips each epoch.
pub fn compose_batch(clips: &[Waveform], cfg: &TrainConfig, step: u64) -> Result<Vec<Excerpt>, TrainError> {
    if clips.is_empty() {
        return Err(TrainError::Config("no training clips".into()));
    }
    if cfg.batch_audio_budget_seconds < cfg.crop_seconds {
        return Err(TrainError::Config(format!(
            "batch_audio_budget_seconds {} is below crop_seconds {}",
            cfg.batch_audio_budget_seconds, cfg.crop_seconds
        )));
    }
    let b = cfg.batch_size() as u64;
    let n = clips.len() as u64;
    let mut orders: HashMap<u64, Vec<usize>> = HashMap::new();
    (0..b)
        .map(|j| {
            let pos = step * b + j;
            let epoch = pos / n;
            let order = orders.entry(epoch).or_insert_with(|| epoch_order(clips.len(), cfg.seed, epoch));
            let clip = &clips[order[(pos % n) as usize]];
            let seed = derive_seed(cfg.seed, &[STREAM_CROP, step, j]);
            Ok(crop_excerpt(clip, cfg.crop_seconds, CropPolicy::Random(seed))?)
        })
        .collect()
}

/// Student, teacher and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub distill: DistillState,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let student = cfg.encoder.init_params(derive_seed(cfg.seed, &[STREAM_INIT]))?;
        let adam = AdamState::new(&student);
        Ok(TrainState { distill: DistillState::new(student), adam })
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.distill.step
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub tau: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub masked_fraction: f64,
}

struct ClipResult {
    loss: f64,
    masked_fraction: f64,
    grads: ParamStore<f32>,
}

fn clip_gradients(
    cfg: &TrainConfig,
    state: &TrainState,
    excerpt: &Excerpt,
    step: u64,
    slot: u64,
    scale: f32,
) -> Result<ClipResult, TrainError> {
    let samples = normalize_samples(&excerpt.samples)?;
    // Teacher in eval mode with the unmasked input.
    let teacher = encode(&cfg.encoder, &state.distill.teacher, &samples, None)?;
    let target = build_targets(&teacher.layers, &cfg.target)?;
    let mask = sample_mask(teacher.frames(), &cfg.mask, derive_seed(cfg.seed, &[STREAM_MASK, step, slot]))?;

    let mut g = Graph::new().with_training(derive_seed(cfg.seed, &[STREAM_DROPOUT, step, slot]));
    let out = forward(&mut g, &cfg.encoder, &state.distill.student, &samples, Some(&mask))?;
    let loss = distill_loss_graph(&mut g, out.prediction, &target, &mask, cfg.target.loss_beta)?;
    let value = g.value(loss).data()[0] as f64;
    let mut grads = g.backward_seeded(loss, scale)?;
    let mut store = ParamStore::new();
    for (name, var) in out.params {
        let grad = grads.take(var).unwrap_or_else(|| Tensor::zeros(g.value(var).shape()));
        store.insert(name, grad);
    }
    Ok(ClipResult { loss: value, masked_fraction: mask.fraction(), grads: store })
}

fn batch_gradients(
    cfg: &TrainConfig,
    state: &TrainState,
    batch: &[Excerpt],
    threads: usize,
) -> Vec<Result<ClipResult, TrainError>> {
    let step = state.step();
    let scale = 1.0 / batch.len() as f32;
    let run = |i: usize| clip_gradients(cfg, state, &batch[i], step, i as u64, scale);
    let threads = threads.clamp(1, batch.len());
    if threads == 1 {
        return (0..batch.len()).map(run).collect();
    }
    let mut slots: Vec<Option<Result<ClipResult, TrainError>>> = (0..batch.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let run = &run;
        let workers: Vec<_> = (0..threads)
            .map(|w| s.spawn(move || (w..batch.len()).step_by(threads).map(|i| (i, run(i))).collect::<Vec<_>>()))
            .collect();
        for w in workers {
            for (i, r) in w.join().expect("training worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every clip is computed")).collect()
}

/// One optimization step on `batch`; `threads` only affects speed.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &[Excerpt],
    threads: usize,
) -> Result<StepRecord, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let step = state.step() + 1;
    let lr = cfg.lr_at(step);
    let tau = tau_schedule(state.step(), &cfg.ema);
    let non_finite = |loss: f64, grad_norm: f64, detail: String| TrainError::NonFinite { step, loss, lr, grad_norm, detail };

    let mut grads = state.distill.student.zeros_like();
    let (mut loss, mut masked) = (0.0, 0.0);
    for r in batch_gradients(cfg, state, batch, threads) {
        let r = match r {
            Err(TrainError::Numerics(NumericsError::NonFinite(op))) => {
                return Err(non_finite(f64::NAN, f64::NAN, format!("forward produced a non-finite value in {op}")))
            }
            other => other?,
        };
        loss += r.loss;
        masked += r.masked_fraction;
        for ((_, acc), (_, g)) in grads.iter_mut().zip(r.grads.iter()) {
            acc.add_assign(g)?;
        }
    }
    loss /= batch.len() as f64;
    masked /= batch.len() as f64;
    if !grads.same_layout(&state.distill.student) {
        return Err(TrainError::Config("gradient table does not match the student".into()));
    }
    let grad_norm = grads.global_norm();
    if !loss.is_finite() || !grad_norm.is_finite() {
        let detail = grads
            .iter()
            .map(|(n, g)| format!("{n}={:.3e}", g.sum_sq().sqrt()))
            .collect::<Vec<_>>()
            .join(" ");
        return Err(non_finite(loss, grad_norm, format!("grad norms: {detail}")));
    }

    let teacher_before = param_fingerprint(&state.distill.teacher);
    adam_step(&mut state.distill.student, &grads, &mut state.adam, lr, &cfg.adam)?;
    assert_eq!(teacher_before, param_fingerprint(&state.distill.teacher), "optimizer touched the teacher");
    state.distill.ema_update(tau)?;
    state.distill.step = step;
    Ok(StepRecord { step, loss, tau, lr, grad_norm, masked_fraction: masked })
}

/// Runtime options that do not change results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads per step; 0 picks the available parallelism.
    pub threads: usize,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Log progress every this many steps (0 = silent).
    pub progress_every: u64,
}

impl RunOptions {
    pub fn thread_count(&self) -> usize {
        match self.threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    /// Records of the steps run in this invocation.
    pub records: Vec<StepRecord>,
    pub state: TrainState,
}

pub const OUT_DIRS: [&str; 4] = ["checkpoints", "features", "reports", "logs"];

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}.m2v"))
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("logs").join("metrics.jsonl")
}

/// Reads a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>, TrainError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

/// Trains until `total_steps`, writing checkpoints every `checkpoint_every`
/// steps plus the last, and one metrics line per step.
pub fn run_pretrain(cfg: &TrainConfig, clips: &[Waveform], out: &Path, opts: &RunOptions) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    let crop = crop_len(cfg.crop_seconds, cfg.encoder.sample_rate)?;
    if let Some(c) = clips.iter().find(|c| c.len() < crop) {
        return Err(AudioError::TooShort { source_id: c.source_id.clone(), needed: crop, got: c.len() }.into());
    }
    for d in OUT_DIRS {
        let p = out.join(d);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut state = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config != *cfg {
                let diff = config_diff(&ck.config, cfg).join(", ");
                return Err(TrainError::Config(format!("checkpoint config differs in: {diff}")));
            }
            ck.into_state()
        }
        None => TrainState::new(cfg)?,
    };
    let config_file = out.join("logs").join("config.json");
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&config_file, text + "\n").map_err(io_err(&config_file))?;

    let metrics = metrics_path(out);
    let mut kept = Vec::new();
    if state.step() > 0 && metrics.exists() {
        kept = read_metrics(&metrics)?.into_iter().filter(|r| r.step <= state.step()).collect();
    }
    let mut log = BufWriter::new(
        OpenOptions::new().create(true).write(true).truncate(true).open(&metrics).map_err(io_err(&metrics))?,
    );
    for r in &kept {
        writeln!(log, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io_err(&metrics))?;
    }

    let threads = opts.thread_count();
    let mut checkpoints = Vec::new();
    let mut records = Vec::new();
    let started = std::time::Instant::now();
    while state.step() < cfg.total_steps {
        let batch = compose_batch(clips, cfg, state.step())?;
        let rec = train_step(&mut state, cfg, &batch, threads)?;
        writeln!(log, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io_err(&metrics))?;
        if opts.progress_every > 0 && rec.step % opts.progress_every == 0 {
            log::info!(
                "step {}/{} loss {:.4} lr {:.2e} tau {:.5} ({:.1} s)",
                rec.step,
                cfg.total_steps,
                rec.loss,
                rec.lr,
                rec.tau,
                started.elapsed().as_secs_f64()
            );
        }
        let step = rec.step;
        records.push(rec);
        if step % cfg.checkpoint_every == 0 || step == cfg.total_steps {
            log.flush().map_err(io_err(&metrics))?;
            let path = checkpoint_path(out, step);
            Checkpoint::from_state(cfg, &state).save(&path)?;
            checkpoints.push(path);
        }
    }
    log.flush().map_err(io_err(&metrics))?;
    Ok(PretrainOutcome { checkpoints, records, state })
}
