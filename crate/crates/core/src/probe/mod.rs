//! Frozen-feature probing: pooled features at every representation tap,
//! small supervised heads per task, metrics and the report.

mod cache;
mod head;
mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{load_clips, normalize_samples, AudioError, ManifestRecord, Waveform};
use crate::derive_seed;
use crate::encoder::{encode, EncoderConfig, EncoderError, LayerOutputs};
use crate::numerics::{ParamStore, Tensor};
use crate::synth::Key;
use crate::trainer::{Checkpoint, TrainError};

pub use cache::{FeatureCache, FEATURE_MAGIC, FEATURE_VERSION};
pub use head::{fit_head, FitSettings, Head, HeadKind, Matrix, Objective};
pub use metrics::{
    accuracy, average_precision, key_weighted_score, key_weighted_score_with, macro_metric, mean_key_score, r2,
    roc_auc, select_checkpoint, CheckpointLog, KeyScoreTable, Task,
};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("bad probe data: {0}")]
    Data(String),
    #[error("degenerate {task} labels: only `{class}` occurs in the training split")]
    Degenerate { task: &'static str, class: String },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Which parameter table of a checkpoint is probed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeWeights {
    #[default]
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub head: HeadKind,
    pub l2_grid: Vec<f64>,
    pub max_epochs: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    /// Epochs between validation checks.
    pub eval_every: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: ProbeWeights,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            head: HeadKind::Linear,
            l2_grid: vec![1e-4, 1e-3, 1e-2],
            max_epochs: 500,
            patience: 10,
            eval_every: 10,
            lr: 1e-2,
            seed: 0,
            weights: ProbeWeights::Student,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.l2_grid.is_empty() || self.l2_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(ProbeError::Config("l2_grid must be a nonempty list of non-negative values".into()));
        }
        if self.max_epochs == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(ProbeError::Config("max_epochs, eval_every and patience must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(ProbeError::Config(format!("lr {} must be positive", self.lr)));
        }
        if let HeadKind::Mlp { width: 0 } = self.head {
            return Err(ProbeError::Config("mlp width must be positive".into()));
        }
        Ok(())
    }
}

/// A point in the network whose output is probed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tap {
    ConvOutput,
    /// 1-based transformer layer.
    Layer(usize),
    /// Plain average of the last `k` layer outputs.
    MeanTopK(usize),
}

impl Tap {
    /// Conv output, every layer, then the top-K mean.
    pub fn all(layers: usize, top_k: usize) -> Vec<Tap> {
        let mut taps = vec![Tap::ConvOutput];
        taps.extend((1..=layers).map(Tap::Layer));
        taps.push(Tap::MeanTopK(top_k));
        taps
    }

    pub fn id(self) -> u32 {
        match self {
            Tap::ConvOutput => 0,
            Tap::Layer(i) => i as u32,
            Tap::MeanTopK(k) => 0x100 + k as u32,
        }
    }

    pub fn from_id(id: u32) -> Option<Tap> {
        match id {
            0 => Some(Tap::ConvOutput),
            i if i < 0x100 => Some(Tap::Layer(i as usize)),
            k if k > 0x100 && k < 0x200 => Some(Tap::MeanTopK((k - 0x100) as usize)),
            _ => None,
        }
    }

    pub fn name(self) -> String {
        match self {
            Tap::ConvOutput => "conv".into(),
            Tap::Layer(i) => format!("layer{i}"),
            Tap::MeanTopK(k) => format!("mean_top{k}"),
        }
    }

    fn validate(self, layers: usize) -> Result<(), ProbeError> {
        match self {
            Tap::Layer(i) | Tap::MeanTopK(i) if i == 0 || i > layers => {
                Err(ProbeError::Config(format!("tap {} outside 1..={layers}", self.name())))
            }
            _ => Ok(()),
        }
    }
}

/// Mean over time of a `T×D` matrix.
pub fn pool_features(x: &Tensor<f32>) -> Result<Vec<f32>, ProbeError> {
    let (t, d) = x.dims2().map_err(|e| ProbeError::Data(e.to_string()))?;
    if t == 0 {
        return Err(ProbeError::Data("cannot pool zero frames".into()));
    }
    let mut acc = vec![0.0f64; d];
    for row in x.data().chunks(d) {
        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
    }
    Ok(acc.iter().map(|a| (a / t as f64) as f32).collect())
}

/// Frame-level `T×D` output of a tap.
pub fn tap_frames(out: &LayerOutputs, tap: Tap) -> Result<Tensor<f32>, ProbeError> {
    tap.validate(out.layers.len())?;
    match tap {
        Tap::ConvOutput => Ok(out.conv.clone()),
        Tap::Layer(i) => Ok(out.layers[i - 1].clone()),
        Tap::MeanTopK(k) => {
            let top = &out.layers[out.layers.len() - k..];
            let mut acc = top[0].clone();
            for l in &top[1..] {
                acc.data_mut().iter_mut().zip(l.data()).for_each(|(a, &v)| *a += v);
            }
            let inv = 1.0 / k as f32;
            acc.data_mut().iter_mut().for_each(|a| *a *= inv);
            Ok(acc)
        }
    }
}

fn tap_vector(out: &LayerOutputs, tap: Tap) -> Result<Vec<f32>, ProbeError> {
    pool_features(&tap_frames(out, tap)?)
}

/// Pooled features `[clip][tap]` of whole clips, extracted in parallel.
pub fn extract_pooled(
    cfg: &EncoderConfig,
    params: &ParamStore<f32>,
    clips: &[&Waveform],
    taps: &[Tap],
    threads: usize,
) -> Result<Vec<Vec<Vec<f32>>>, ProbeError> {
    for t in taps {
        t.validate(cfg.layers)?;
    }
    let one = |w: &Waveform| -> Result<Vec<Vec<f32>>, ProbeError> {
        let samples = normalize_samples(&w.samples)?;
        let out = encode(cfg, params, &samples, None)?;
        taps.iter().map(|&t| tap_vector(&out, t)).collect()
    };
    let threads = threads.clamp(1, clips.len().max(1));
    if threads == 1 {
        return clips.iter().map(|w| one(w)).collect();
    }
    let mut slots: Vec<Option<Result<Vec<Vec<f32>>, ProbeError>>> = (0..clips.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let one = &one;
        let workers: Vec<_> = (0..threads)
            .map(|w| s.spawn(move || (w..clips.len()).step_by(threads).map(|i| (i, one(clips[i]))).collect::<Vec<_>>()))
            .collect();
        for w in workers {
            for (i, r) in w.join().expect("extraction worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every clip is extracted")).collect()
}

/// The three labeled splits of a corpus, audio included.
pub struct ProbeData {
    pub splits: [Vec<(ManifestRecord, Waveform)>; 3],
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

impl ProbeData {
    /// Reads `train.jsonl`, `valid.jsonl` and `test.jsonl` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, ProbeError> {
        let load = |name: &str| load_clips(&dir.join(format!("{name}.jsonl")));
        Ok(ProbeData { splits: [load("train")?, load("valid")?, load("test")?] })
    }

    fn records(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.splits.iter().flatten().map(|(r, _)| r)
    }
}

/// Encoded targets of one task over a split.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskLabels {
    /// Multi-hot rows over the tag vocabulary `names`.
    MultiLabel { rows: Vec<Vec<bool>>, names: Vec<String> },
    /// Class indices into `names`.
    Class { labels: Vec<usize>, names: Vec<String> },
    Values(Vec<[f64; 2]>),
}

impl TaskLabels {
    fn target_matrix(&self) -> Matrix {
        match self {
            TaskLabels::MultiLabel { rows, .. } => {
                Matrix::from_rows(&rows.iter().map(|r| r.iter().map(|&b| f64::from(u8::from(b))).collect()).collect::<Vec<_>>())
            }
            TaskLabels::Class { labels, names } => {
                let classes = names.len();
                let mut m = Matrix::zeros(labels.len(), classes);
                for (i, &c) in labels.iter().enumerate() {
                    m.data[i * classes + c] = 1.0;
                }
                m
            }
            TaskLabels::Values(v) => Matrix::from_rows(&v.iter().map(|p| p.to_vec()).collect::<Vec<_>>()),
        }
    }

    fn outputs(&self) -> usize {
        match self {
            TaskLabels::MultiLabel { names, .. } | TaskLabels::Class { names, .. } => names.len(),
            TaskLabels::Values(_) => 2,
        }
    }

    fn objective(&self) -> Objective {
        match self {
            TaskLabels::MultiLabel { .. } => Objective::MultiLabel,
            TaskLabels::Class { .. } => Objective::MultiClass,
            TaskLabels::Values(_) => Objective::Regression,
        }
    }

    /// A class (or tag) that makes the labels single-class, if any.
    fn degenerate_class(&self) -> Option<String> {
        match self {
            TaskLabels::MultiLabel { rows, names } => names.iter().enumerate().find_map(|(j, name)| {
                let on = rows.iter().filter(|r| r[j]).count();
                (on == 0 || on == rows.len()).then(|| name.clone())
            }),
            TaskLabels::Class { labels, names } => {
                let first = *labels.first()?;
                labels.iter().all(|&c| c == first).then(|| names[first].clone())
            }
            TaskLabels::Values(_) => None,
        }
    }
}

/// Per-split labels of `task`, or `None` (with the reason) when any clip
/// lacks them.
fn task_labels(data: &ProbeData, task: Task) -> Result<Result<[TaskLabels; 3], String>, ProbeError> {
    let missing = |what: &str| Ok(Err(format!("{}: some clips have no {what} label; task skipped", task.name())));
    match task {
        Task::Tagging => {
            if data.records().any(|r| r.labels.tags.is_none()) {
                return missing("tags");
            }
            let mut vocab: Vec<&String> = data.records().flat_map(|r| r.labels.tags.iter().flatten()).collect();
            vocab.sort();
            vocab.dedup();
            let names: Vec<String> = vocab.iter().map(|v| (*v).clone()).collect();
            let enc = |split: &[(ManifestRecord, Waveform)]| TaskLabels::MultiLabel {
                rows: split
                    .iter()
                    .map(|(r, _)| {
                        let tags = r.labels.tags.as_ref().expect("checked above");
                        vocab.iter().map(|v| tags.contains(v)).collect()
                    })
                    .collect(),
                names: names.clone(),
            };
            Ok(Ok([enc(&data.splits[0]), enc(&data.splits[1]), enc(&data.splits[2])]))
        }
        Task::Genre | Task::Key => {
            let get = |r: &ManifestRecord| if task == Task::Genre { r.labels.genre.clone() } else { r.labels.key.clone() };
            if data.records().any(|r| get(r).is_none()) {
                return missing(task.name());
            }
            let vocab: Vec<String> = if task == Task::Genre {
                let mut v: Vec<String> = data.records().filter_map(get).collect();
                v.sort();
                v.dedup();
                v
            } else {
                (0..Key::COUNT).map(|c| Key::from_class(c).expect("valid class").to_string()).collect()
            };
            let class_of = |s: &str| -> Result<usize, ProbeError> {
                if task == Task::Key {
                    let k: Key = s.parse().map_err(|e| ProbeError::Data(format!("key label: {e}")))?;
                    Ok(k.class())
                } else {
                    Ok(vocab.iter().position(|v| v == s).expect("vocabulary covers every label"))
                }
            };
            let mut out = Vec::with_capacity(3);
            for split in &data.splits {
                let labels = split.iter().map(|(r, _)| class_of(&get(r).expect("checked above"))).collect::<Result<Vec<_>, _>>()?;
                out.push(TaskLabels::Class { labels, names: vocab.clone() });
            }
            Ok(Ok(out.try_into().expect("three splits")))
        }
        Task::Emotion => {
            if data.records().any(|r| r.labels.arousal.is_none() || r.labels.valence.is_none()) {
                return missing("arousal/valence");
            }
            let enc = |split: &[(ManifestRecord, Waveform)]| {
                TaskLabels::Values(
                    split.iter().map(|(r, _)| [r.labels.arousal.expect("checked"), r.labels.valence.expect("checked")]).collect(),
                )
            };
            Ok(Ok([enc(&data.splits[0]), enc(&data.splits[1]), enc(&data.splits[2])]))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggingScores {
    pub auc: f64,
    pub ap: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenreScores {
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyScores {
    pub weighted_score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionScores {
    pub r2_arousal: f64,
    pub r2_valence: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tagging: Option<TaggingScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genre: Option<GenreScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<KeyScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<EmotionScores>,
}

impl TaskScores {
    /// The value the task's selection rule maximizes.
    pub fn selection_value(&self, task: Task) -> Option<f64> {
        match task {
            Task::Tagging => self.tagging.map(|s| s.auc),
            Task::Genre => self.genre.map(|s| s.accuracy),
            Task::Key => self.key.map(|s| s.weighted_score),
            Task::Emotion => self.emotion.map(|s| (s.r2_arousal + s.r2_valence) / 2.0),
        }
    }

    fn copy_task(&mut self, other: &TaskScores, task: Task) {
        match task {
            Task::Tagging => self.tagging = other.tagging,
            Task::Genre => self.genre = other.genre,
            Task::Key => self.key = other.key,
            Task::Emotion => self.emotion = other.emotion,
        }
    }

    /// Arithmetic mean of the six displayed numbers, in percent.
    pub fn average_percent(&self) -> Option<f64> {
        let (t, g, k, e) = (self.tagging?, self.genre?, self.key?, self.emotion?);
        let six = [t.auc, t.ap, g.accuracy, k.weighted_score, e.r2_arousal, e.r2_valence];
        Some(six.iter().map(|v| v * 100.0).sum::<f64>() / 6.0)
    }
}

/// Scores `head` on `(x, labels)` for `task`.
fn evaluate(task: Task, head: &Head, x: &Matrix, labels: &TaskLabels) -> Result<TaskScores, ProbeError> {
    let p = head.predict(x);
    let rows: Vec<Vec<f64>> = (0..p.rows).map(|i| p.row(i).to_vec()).collect();
    let argmax = |r: &Vec<f64>| r.iter().enumerate().fold(0, |b, (i, &v)| if v > r[b] { i } else { b });
    let mut s = TaskScores::default();
    match (task, labels) {
        (Task::Tagging, TaskLabels::MultiLabel { rows: y, .. }) => {
            let (auc, _) = macro_metric(&rows, y, roc_auc)?;
            let (ap, _) = macro_metric(&rows, y, average_precision)?;
            s.tagging = Some(TaggingScores { auc, ap });
        }
        (Task::Genre, TaskLabels::Class { labels, .. }) => {
            s.genre = Some(GenreScores { accuracy: accuracy(labels, &rows.iter().map(argmax).collect::<Vec<_>>())? });
        }
        (Task::Key, TaskLabels::Class { labels, .. }) => {
            let est: Vec<usize> = rows.iter().map(argmax).collect();
            s.key = Some(KeyScores { weighted_score: mean_key_score(labels, &est)? });
        }
        (Task::Emotion, TaskLabels::Values(v)) => {
            let col = |j: usize| -> (Vec<f64>, Vec<f64>) { (v.iter().map(|p| p[j]).collect(), rows.iter().map(|r| r[j]).collect()) };
            let ((ya, pa), (yv, pv)) = (col(0), col(1));
            s.emotion = Some(EmotionScores { r2_arousal: r2(&ya, &pa)?, r2_valence: r2(&yv, &pv)? });
        }
        _ => return Err(ProbeError::Data(format!("labels do not match task {}", task.name()))),
    }
    Ok(s)
}

/// A head chosen over the l2 grid by validation score.
pub struct FittedProbe {
    pub head: Head,
    pub l2: f64,
    pub valid_score: f64,
}

/// Fits one head per l2 value and keeps the best on validation (ties go to
/// the earlier grid entry).
pub fn fit_probe(
    task: Task,
    train: (&Matrix, &TaskLabels),
    valid: (&Matrix, &TaskLabels),
    cfg: &ProbeConfig,
) -> Result<FittedProbe, ProbeError> {
    cfg.validate()?;
    if train.0.rows < 10 {
        return Err(ProbeError::Data(format!("{} training rows; at least 10 required", train.0.rows)));
    }
    if valid.0.rows == 0 {
        return Err(ProbeError::Data("empty validation split".into()));
    }
    if let Some(class) = train.1.degenerate_class() {
        return Err(ProbeError::Degenerate { task: task.name(), class });
    }
    let y = train.1.target_matrix();
    let score = |h: &Head| {
        evaluate(task, h, valid.0, valid.1).ok().and_then(|s| s.selection_value(task)).unwrap_or(f64::NEG_INFINITY)
    };
    let mut best: Option<FittedProbe> = None;
    for (i, &l2) in cfg.l2_grid.iter().enumerate() {
        let settings = FitSettings { l2, lr: cfg.lr, max_epochs: cfg.max_epochs, patience: cfg.patience, eval_every: cfg.eval_every };
        let seed = derive_seed(cfg.seed, &[task as u64, i as u64]);
        let head = Head::new(cfg.head, train.0.cols, train.1.outputs(), train.1.objective(), seed);
        let (head, valid_score) = fit_head(head, train.0, &y, &settings, &score);
        if best.as_ref().map_or(true, |b| valid_score > b.valid_score) {
            best = Some(FittedProbe { head, l2, valid_score });
        }
    }
    Ok(best.expect("grid is nonempty"))
}

/// Standardizes columns with statistics of `train` (std floored at 1e-8).
fn standardize(train: &Matrix, others: &mut [&mut Matrix]) -> Matrix {
    let (n, d) = (train.rows as f64, train.cols);
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in train.data.chunks(d) {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
    }
    for r in train.data.chunks(d) {
        var.iter_mut().zip(r).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt().max(1e-8)).collect();
    let apply = |m: &mut Matrix| {
        for r in m.data.chunks_mut(d) {
            r.iter_mut().zip(&mean).zip(&inv).for_each(|((v, mu), s)| *v = (*v - mu) * s);
        }
    };
    let mut t = train.clone();
    apply(&mut t);
    for o in others.iter_mut() {
        apply(o);
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapReport {
    pub tap: String,
    pub tap_id: u32,
    pub test: TaskScores,
    pub valid: TaskScores,
    /// Selected l2 per task.
    pub l2: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestTap {
    pub tap: String,
    pub conv_output: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    pub taps: Vec<TapReport>,
    /// Test scores of the tap chosen per task on validation.
    pub best: TaskScores,
    pub best_valid: TaskScores,
    pub best_taps: BTreeMap<String, BestTap>,
    /// Checkpoint step chosen per task when several checkpoints of one run
    /// are combined.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub selected_steps: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub average: Option<f64>,
    pub notices: Vec<String>,
}

impl MetricReport {
    /// Validation metrics in the shape checkpoint selection consumes.
    pub fn validation_log(&self) -> CheckpointLog {
        let v = &self.best_valid;
        CheckpointLog {
            step: self.step.unwrap_or(0),
            auc: v.tagging.map(|t| t.auc),
            accuracy: v.genre.map(|g| g.accuracy),
            key_score: v.key.map(|k| k.weighted_score),
            r2_arousal: v.emotion.map(|e| e.r2_arousal),
            r2_valence: v.emotion.map(|e| e.r2_valence),
        }
    }
}

/// Runtime options for a probe run.
#[derive(Clone, Debug, Default)]
pub struct ProbeOptions {
    pub threads: usize,
    /// Directory for per-tap `M2VF` caches.
    pub features_dir: Option<PathBuf>,
}

/// Probes an encoder with the given parameters on every tap.
pub fn probe_encoder(
    encoder: &EncoderConfig,
    params: &ParamStore<f32>,
    top_k: usize,
    data: &ProbeData,
    cfg: &ProbeConfig,
    opts: &ProbeOptions,
    label: &str,
) -> Result<MetricReport, ProbeError> {
    cfg.validate()?;
    let taps = Tap::all(encoder.layers, top_k);
    let clips: Vec<&Waveform> = data.splits.iter().flatten().map(|(_, w)| w).collect();
    let threads = match opts.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    let feats = extract_pooled(encoder, params, &clips, &taps, threads)?;

    if let Some(dir) = &opts.features_dir {
        fs::create_dir_all(dir).map_err(|source| ProbeError::Io { path: dir.display().to_string(), source })?;
        let ids: Vec<String> = data.records().map(ManifestRecord::clip_id).collect();
        for (ti, tap) in taps.iter().enumerate() {
            let cache = FeatureCache { tap_id: tap.id(), records: ids.iter().cloned().zip(feats.iter().map(|f| f[ti].clone())).collect() };
            cache.save(&dir.join(format!("{}.m2vf", tap.name())))?;
        }
    }

    let mut notices = Vec::new();
    let mut labels = Vec::new();
    for task in Task::ALL {
        match task_labels(data, task)? {
            Ok(l) => labels.push((task, l)),
            Err(notice) => {
                log::warn!("{notice}");
                notices.push(notice);
            }
        }
    }
    let sizes = data.splits.each_ref().map(Vec::len);
    let mut tap_reports = Vec::new();
    for (ti, tap) in taps.iter().enumerate() {
        let mut start = 0;
        let mut mats: Vec<Matrix> = sizes
            .iter()
            .map(|&n| {
                let rows: Vec<Vec<f64>> = feats[start..start + n].iter().map(|f| f[ti].iter().map(|&v| v as f64).collect()).collect();
                start += n;
                Matrix::from_rows(&rows)
            })
            .collect();
        let [train, valid, test] = &mut mats[..] else { unreachable!("three splits") };
        let train = standardize(train, &mut [valid, test]);
        let mut rep = TapReport { tap: tap.name(), tap_id: tap.id(), test: TaskScores::default(), valid: TaskScores::default(), l2: BTreeMap::new() };
        for (task, l) in &labels {
            let probe = fit_probe(*task, (&train, &l[0]), (&mats[1], &l[1]), cfg)?;
            let scored = evaluate(*task, &probe.head, &mats[1], &l[1]).and_then(|v| Ok((v, evaluate(*task, &probe.head, &mats[2], &l[2])?)));
            match scored {
                Ok((valid, test)) => {
                    rep.valid.copy_task(&valid, *task);
                    rep.test.copy_task(&test, *task);
                    rep.l2.insert(task.name().to_string(), probe.l2);
                }
                Err(ProbeError::Metric(m)) => {
                    let notice = format!("{} at {}: {m}; task skipped", task.name(), tap.name());
                    log::warn!("{notice}");
                    notices.push(notice);
                }
                Err(e) => return Err(e),
            }
        }
        tap_reports.push(rep);
    }

    let mut best = TaskScores::default();
    let mut best_valid = TaskScores::default();
    let mut best_taps = BTreeMap::new();
    for (task, _) in &labels {
        // Earliest tap wins ties.
        let mut pick: Option<(f64, usize)> = None;
        for (i, r) in tap_reports.iter().enumerate() {
            if let Some(v) = r.valid.selection_value(*task) {
                if pick.map_or(true, |(bv, _)| v > bv) {
                    pick = Some((v, i));
                }
            }
        }
        if let Some((_, i)) = pick {
            best.copy_task(&tap_reports[i].test, *task);
            best_valid.copy_task(&tap_reports[i].valid, *task);
            best_taps.insert(
                task.name().to_string(),
                BestTap { tap: tap_reports[i].tap.clone(), conv_output: taps[i] == Tap::ConvOutput },
            );
        }
    }
    let average = best.average_percent();
    Ok(MetricReport {
        label: label.to_string(),
        checkpoint: None,
        step: None,
        taps: tap_reports,
        best,
        best_valid,
        best_taps,
        selected_steps: BTreeMap::new(),
        average,
        notices,
    })
}

/// Combines the reports of several checkpoints of one run into a single
/// row: per task, the checkpoint with the best validation metric supplies
/// the test scores.
pub fn combine_checkpoints(label: &str, reports: &[MetricReport]) -> Result<MetricReport, ProbeError> {
    if reports.is_empty() {
        return Err(ProbeError::Data(format!("run `{label}` has no probed checkpoints")));
    }
    let logs: Vec<CheckpointLog> = reports.iter().map(MetricReport::validation_log).collect();
    let mut out = MetricReport {
        label: label.to_string(),
        checkpoint: None,
        step: None,
        taps: Vec::new(),
        best: TaskScores::default(),
        best_valid: TaskScores::default(),
        best_taps: BTreeMap::new(),
        selected_steps: BTreeMap::new(),
        average: None,
        notices: reports[0].notices.clone(),
    };
    for task in Task::ALL {
        if logs.iter().all(|l| l.selection_value(task).is_none()) {
            continue;
        }
        let step = select_checkpoint(&logs, task)?;
        let r = reports.iter().find(|r| r.validation_log().step == step).expect("selected step comes from a report");
        out.best.copy_task(&r.best, task);
        out.best_valid.copy_task(&r.best_valid, task);
        if let Some(b) = r.best_taps.get(task.name()) {
            out.best_taps.insert(task.name().to_string(), b.clone());
        }
        out.selected_steps.insert(task.name().to_string(), step);
    }
    out.average = out.best.average_percent();
    Ok(out)
}

/// Loads a checkpoint and probes it on every tap.
pub fn run_probe_suite(checkpoint: &Path, data: &ProbeData, cfg: &ProbeConfig, opts: &ProbeOptions) -> Result<MetricReport, ProbeError> {
    let ck = Checkpoint::load(checkpoint)?;
    let params = match cfg.weights {
        ProbeWeights::Student => &ck.student,
        ProbeWeights::Teacher => &ck.teacher,
    };
    let label = checkpoint.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let mut report = probe_encoder(&ck.config.encoder, params, ck.config.target.top_k, data, cfg, opts, &label)?;
    report.checkpoint = Some(checkpoint.display().to_string());
    report.step = Some(ck.step);
    Ok(report)
}

/// Aligned text table with one row per report, in percent; `◊` marks
/// values that come from the conv-output tap.
pub fn format_table(reports: &[MetricReport]) -> String {
    let header = ["Model", "Tags AUC", "Tags AP", "Genre Acc", "Key Score", "R2 Arousal", "R2 Valence", "Average"];
    let width = reports.iter().map(|r| r.label.chars().count()).chain([header[0].len()]).max().unwrap_or(5);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", header[0]);
    for h in &header[1..] {
        let _ = write!(out, " | {h:>10}");
    }
    out.push('\n');
    for r in reports {
        let cell = |v: Option<f64>, task: &str| match v {
            Some(v) => {
                let mark = if r.best_taps.get(task).is_some_and(|b| b.conv_output) { "◊" } else { " " };
                format!("{:>9.1}{mark}", v * 100.0)
            }
            None => format!("{:>10}", "-"),
        };
        let b = &r.best;
        let _ = write!(out, "{:<width$}", r.label);
        for c in [
            cell(b.tagging.map(|t| t.auc), "tagging"),
            cell(b.tagging.map(|t| t.ap), "tagging"),
            cell(b.genre.map(|g| g.accuracy), "genre"),
            cell(b.key.map(|k| k.weighted_score), "key"),
            cell(b.emotion.map(|e| e.r2_arousal), "emotion"),
            cell(b.emotion.map(|e| e.r2_valence), "emotion"),
            r.average.map_or_else(|| format!("{:>10}", "-"), |a| format!("{a:>9.1} ")),
        ] {
            let _ = write!(out, " | {c}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_examples() {
        let one = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pool_features(&one).unwrap(), vec![1.0, 2.0, 3.0]);
        let sym = Tensor::new(&[2, 2], vec![1.5, -2.0, -1.5, 2.0]).unwrap();
        assert_eq!(pool_features(&sym).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn desk_taps() {
        let taps = Tap::all(2, 1);
        assert_eq!(taps.len(), 4);
        assert_eq!(taps.iter().map(|t| t.name()).collect::<Vec<_>>(), ["conv", "layer1", "layer2", "mean_top1"]);
        assert!(Tap::Layer(3).validate(2).is_err());
        for t in Tap::all(12, 8) {
            assert_eq!(Tap::from_id(t.id()), Some(t));
        }
        assert_eq!(Tap::from_id(0x100), None);
    }

    #[test]
    fn average_of_the_six_numbers() {
        let s = TaskScores {
            tagging: Some(TaggingScores { auc: 0.895, ap: 0.359 }),
            genre: Some(GenreScores { accuracy: 0.766 }),
            key: Some(KeyScores { weighted_score: 0.501 }),
            emotion: Some(EmotionScores { r2_arousal: 0.694, r2_valence: 0.574 }),
        };
        assert!((s.average_percent().unwrap() - 63.15).abs() < 1e-9);
    }
}
