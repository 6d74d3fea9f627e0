//! Labeled synthetic music corpus.
//!
//! Each clip is an arpeggiated diatonic chord progression in one of 24 keys,
//! voiced with one of four harmonic templates (the genre label), plus up to
//! eight optional components (the tag labels). Emotion labels are fixed
//! affine functions of the clip parameters:
//!
//! * `arousal = clamp(0.7·(tempo − 60)/120 + 0.3·loudness_norm, 0, 1)`
//! * `valence = 0.65·[major] + 0.35·consonance`
//!
//! where `loudness_norm` maps the RMS range `[0.05, 0.2]` onto `[0, 1]` and
//! `consonance` is the fraction of active sound sources that are pitched
//! (arpeggio, bass line, high melody, drone) among all active sources
//! (those plus percussion, noise bed, hi-hat). Vibrato and tremolo modulate
//! existing sources and do not count as sources.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{write_manifest, write_wav_file, AudioError, ClipLabels, ManifestRecord, Waveform, SAMPLE_RATE};

pub const TAG_NAMES: [&str; 8] =
    ["bass-line", "percussion", "vibrato", "noise-bed", "high-melody", "tremolo", "drone", "hi-hat"];
pub const GENRE_NAMES: [&str; 4] = ["pure", "hollow", "bright", "bell"];
pub const PITCH_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

pub const TEMPO_RANGE: (f64, f64) = (60.0, 180.0);
pub const LOUDNESS_RANGE: (f64, f64) = (0.05, 0.2);
pub const MIN_DURATION_S: f64 = 5.0;

const TAG_BASS: u8 = 1 << 0;
const TAG_PERCUSSION: u8 = 1 << 1;
const TAG_VIBRATO: u8 = 1 << 2;
const TAG_NOISE: u8 = 1 << 3;
const TAG_MELODY: u8 = 1 << 4;
const TAG_TREMOLO: u8 = 1 << 5;
const TAG_DRONE: u8 = 1 << 6;
const TAG_HIHAT: u8 = 1 << 7;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Major,
    Minor,
}

/// One of the 24 major/minor keys. Class ids are `tonic + 12·[minor]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Key {
    pub tonic: u8,
    pub mode: Mode,
}

impl Key {
    pub const COUNT: usize = 24;

    pub fn new(tonic: u8, mode: Mode) -> Result<Self, SynthError> {
        if tonic >= 12 {
            return Err(SynthError::Config(format!("tonic {tonic} outside 0..12")));
        }
        Ok(Key { tonic, mode })
    }

    pub fn from_class(class: usize) -> Option<Self> {
        (class < Self::COUNT).then(|| Key {
            tonic: (class % 12) as u8,
            mode: if class < 12 { Mode::Major } else { Mode::Minor },
        })
    }

    pub fn class(self) -> usize {
        self.tonic as usize + if self.mode == Mode::Minor { 12 } else { 0 }
    }

    fn scale(self) -> [u8; 7] {
        match self.mode {
            Mode::Major => [0, 2, 4, 5, 7, 9, 11],
            Mode::Minor => [0, 2, 3, 5, 7, 8, 10],
        }
    }

    /// Pitch classes of the key's diatonic scale.
    pub fn diatonic_pitch_classes(self) -> [u8; 7] {
        self.scale().map(|s| (s + self.tonic) % 12)
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{} {mode}", PITCH_NAMES[self.tonic as usize])
    }
}

impl FromStr for Key {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split_whitespace();
        let (Some(p), Some(m), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(SynthError::Config(format!("key `{s}` is not `<tonic> <major|minor>`")));
        };
        let tonic = PITCH_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(p))
            .ok_or_else(|| SynthError::Config(format!("unknown tonic `{p}`")))?;
        let mode = match m.to_ascii_lowercase().as_str() {
            "major" => Mode::Major,
            "minor" => Mode::Minor,
            _ => return Err(SynthError::Config(format!("unknown mode `{m}`"))),
        };
        Key::new(tonic as u8, mode)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSpec {
    pub key: Key,
    pub tempo: f64,
    pub timbre_family: u8,
    /// Bit `i` enables `TAG_NAMES[i]`.
    pub active_tags: u8,
    /// Target RMS of the rendered clip.
    pub loudness: f64,
    pub duration_s: f64,
    pub seed: u64,
}

impl ClipSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(TEMPO_RANGE.0..=TEMPO_RANGE.1).contains(&self.tempo) {
            return Err(SynthError::Config(format!("tempo {} outside {TEMPO_RANGE:?}", self.tempo)));
        }
        if self.timbre_family as usize >= GENRE_NAMES.len() {
            return Err(SynthError::Config(format!("timbre family {} outside 0..4", self.timbre_family)));
        }
        if !(LOUDNESS_RANGE.0..=LOUDNESS_RANGE.1).contains(&self.loudness) {
            return Err(SynthError::Config(format!("loudness {} outside {LOUDNESS_RANGE:?}", self.loudness)));
        }
        if !(self.duration_s >= MIN_DURATION_S) {
            return Err(SynthError::Config(format!("duration {} s below {MIN_DURATION_S} s", self.duration_s)));
        }
        Ok(())
    }

    fn has(&self, tag: u8) -> bool {
        self.active_tags & tag != 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivedLabels {
    pub tags: [bool; 8],
    pub genre: u8,
    pub key: Key,
    pub arousal: f64,
    pub valence: f64,
}

impl DerivedLabels {
    pub fn to_manifest_labels(&self) -> ClipLabels {
        ClipLabels {
            tags: Some(TAG_NAMES.iter().zip(self.tags).filter(|(_, on)| *on).map(|(n, _)| n.to_string()).collect()),
            genre: Some(GENRE_NAMES[self.genre as usize].to_string()),
            key: Some(self.key.to_string()),
            arousal: Some(self.arousal),
            valence: Some(self.valence),
        }
    }
}

/// Fraction of active sources that are pitched.
pub fn consonance(active_tags: u8) -> f64 {
    let pitched = 1 + [TAG_BASS, TAG_MELODY, TAG_DRONE].iter().filter(|&&t| active_tags & t != 0).count();
    let unpitched = [TAG_PERCUSSION, TAG_NOISE, TAG_HIHAT].iter().filter(|&&t| active_tags & t != 0).count();
    pitched as f64 / (pitched + unpitched) as f64
}

/// Labels as a pure function of the clip spec.
pub fn derive_labels(spec: &ClipSpec) -> DerivedLabels {
    let loudness_norm = (spec.loudness - LOUDNESS_RANGE.0) / (LOUDNESS_RANGE.1 - LOUDNESS_RANGE.0);
    let arousal = ((spec.tempo - TEMPO_RANGE.0) / 120.0 * 0.7 + loudness_norm * 0.3).clamp(0.0, 1.0);
    let major = if spec.key.mode == Mode::Major { 1.0 } else { 0.0 };
    let valence = 0.65 * major + 0.35 * consonance(spec.active_tags);
    DerivedLabels {
        tags: std::array::from_fn(|i| spec.active_tags & (1 << i) != 0),
        genre: spec.timbre_family,
        key: spec.key,
        arousal,
        valence,
    }
}

/// Relative partial amplitudes per timbre family (index = harmonic − 1).
fn partials(family: u8) -> &'static [f64] {
    match family {
        0 => &[1.0],
        1 => &[1.0, 0.0, 0.45, 0.0, 0.25, 0.0, 0.15],
        2 => &[1.0, 0.5, 0.33, 0.25, 0.2, 0.17],
        _ => &[1.0, 0.6, 0.0, 0.4, 0.0, 0.0, 0.0, 0.25],
    }
}

pub fn midi_to_hz(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

/// Chord roots (scale degrees) of the four-bar progression I–IV–V–I.
const PROGRESSION: [usize; 4] = [0, 3, 4, 0];
/// Arpeggio pattern per bar: root, third, fifth, root an octave up.
const ARPEGGIO: [usize; 4] = [0, 2, 4, 7];

/// Semitone offset above the tonic of scale step `step` (may exceed 7).
fn scale_offset(key: Key, step: usize) -> f64 {
    (key.scale()[step % 7] as usize + 12 * (step / 7)) as f64
}

struct Renderer {
    out: Vec<f64>,
    beat: f64,
}

impl Renderer {
    fn n(&self) -> usize {
        self.out.len()
    }

    /// Adds a tone of `midi` pitch spanning `[start, start + dur)` seconds
    /// with a Hann amplitude envelope and the given partial set.
    fn tone(&mut self, midi: f64, start: f64, dur: f64, amp: f64, partial_amps: &[f64], vibrato: bool) {
        let sr = SAMPLE_RATE as f64;
        let f0 = midi_to_hz(midi);
        let s0 = (start * sr).round() as usize;
        let len = (dur * sr).round() as usize;
        for i in 0..len {
            let idx = s0 + i;
            if idx >= self.n() {
                break;
            }
            let t = i as f64 / sr;
            let env = (PI * i as f64 / len as f64).sin().powi(2);
            let mut v = 0.0;
            for (h, &a) in partial_amps.iter().enumerate() {
                let f = f0 * (h + 1) as f64;
                if a == 0.0 || f > 7500.0 {
                    continue;
                }
                let mut phase = 2.0 * PI * f * t;
                if vibrato {
                    phase -= f * 0.006 / 5.5 * (2.0 * PI * 5.5 * t).cos();
                }
                v += a * phase.sin();
            }
            self.out[idx] += amp * env * v;
        }
    }

    fn bars(&self) -> usize {
        (self.n() as f64 / SAMPLE_RATE as f64 / (4.0 * self.beat)).ceil() as usize
    }
}

/// Root MIDI pitch of the arpeggio register for a tonic.
fn arpeggio_root(tonic: u8) -> f64 {
    72.0 + tonic as f64 - if tonic >= 6 { 12.0 } else { 0.0 }
}

/// Renders a clip deterministically from its spec and returns its labels.
pub fn generate_clip(spec: &ClipSpec) -> Result<(Waveform, DerivedLabels), SynthError> {
    spec.validate()?;
    let sr = SAMPLE_RATE as f64;
    let n = (spec.duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let beat = 60.0 / spec.tempo;
    let mut r = Renderer { out: vec![0.0; n], beat };
    let key = spec.key;
    let root = arpeggio_root(key.tonic);
    let timbre = partials(spec.timbre_family);
    let vibrato = spec.has(TAG_VIBRATO);

    for bar in 0..r.bars() {
        let degree = PROGRESSION[bar % PROGRESSION.len()];
        let bar_start = bar as f64 * 4.0 * beat;
        for (b, &step) in ARPEGGIO.iter().enumerate() {
            let midi = root + scale_offset(key, degree + step);
            r.tone(midi, bar_start + b as f64 * beat, beat, 1.0, timbre, vibrato);
        }
        if spec.has(TAG_BASS) {
            let midi = root - 36.0 + scale_offset(key, degree);
            r.tone(midi, bar_start, 4.0 * beat, 0.6, &[1.0, 0.3], false);
        }
        if spec.has(TAG_MELODY) {
            let mut step: i64 = rng.gen_range(0..7);
            for half in 0..8 {
                step = (step + rng.gen_range(-2..=2)).clamp(0, 13);
                let midi = root + 12.0 + scale_offset(key, step as usize);
                r.tone(midi, bar_start + half as f64 * beat / 2.0, beat / 2.0, 0.35, &[1.0], vibrato);
            }
        }
    }
    if spec.has(TAG_DRONE) {
        let base = 48.0 + key.tonic as f64;
        let dur = n as f64 / sr;
        r.tone(base, 0.0, dur, 0.3, &[1.0], false);
        r.tone(base + 7.0, 0.0, dur, 0.2, &[1.0], false);
    }
    let mut out = r.out;
    if spec.has(TAG_PERCUSSION) {
        let hop = (beat * sr).round() as usize;
        for start in (0..n).step_by(hop.max(1)) {
            let mut phase = 0.0;
            for i in 0..((0.25 * sr) as usize).min(n - start) {
                let t = i as f64 / sr;
                let f = 50.0 + 70.0 * (-t / 0.03).exp();
                phase += 2.0 * PI * f / sr;
                out[start + i] += 1.2 * (-t / 0.08).exp() * phase.sin();
            }
        }
    }
    if spec.has(TAG_HIHAT) {
        let hop = (beat * sr / 2.0).round() as usize;
        for start in (0..n).step_by(hop.max(1)) {
            let mut prev = 0.0;
            for i in 0..((0.03 * sr) as usize).min(n - start) {
                let w: f64 = rng.gen_range(-1.0..1.0);
                out[start + i] += 0.5 * (-(i as f64) / (0.008 * sr)).exp() * (w - prev);
                prev = w;
            }
        }
    }
    if spec.has(TAG_NOISE) {
        let normal = Normal::new(0.0, 0.08).expect("valid std");
        for v in out.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    if spec.has(TAG_TREMOLO) {
        for (i, v) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            *v *= 0.75 + 0.25 * (2.0 * PI * 6.0 * t).sin();
        }
    }

    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let gain = if rms > 0.0 { spec.loudness / rms } else { 0.0 };
    let samples: Vec<f32> = out.iter().map(|v| (v * gain).clamp(-1.0, 1.0) as f32).collect();
    let id = format!("clip-{:016x}", spec.seed);
    Ok((Waveform::new(samples, SAMPLE_RATE, id)?, derive_labels(spec)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_clips: usize,
    /// Train / valid / test fractions; must sum to 1.
    pub split_ratios: [f64; 3],
    pub seed: u64,
    pub duration_s: f64,
    /// Probability that each tag is switched on for a clip.
    pub tag_probability: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { n_clips: 240, split_ratios: [0.8, 0.1, 0.1], seed: 0, duration_s: 6.0, tag_probability: 0.5 }
    }
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSummary {
    /// Records per split, in `SPLITS` order.
    pub splits: [Vec<ManifestRecord>; 3],
    pub specs: Vec<ClipSpec>,
}

/// Draws clip specs stratified over key and genre, and their split assignment.
pub fn plan_corpus(cfg: &CorpusConfig) -> Result<(Vec<ClipSpec>, [Vec<usize>; 3]), SynthError> {
    if cfg.n_clips < Key::COUNT {
        return Err(SynthError::Config(format!("need at least {} clips, got {}", Key::COUNT, cfg.n_clips)));
    }
    if cfg.split_ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (cfg.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SynthError::Config(format!("split ratios {:?} must be non-negative and sum to 1", cfg.split_ratios)));
    }
    if !(0.0..=1.0).contains(&cfg.tag_probability) {
        return Err(SynthError::Config("tag probability outside [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let specs: Vec<ClipSpec> = (0..cfg.n_clips)
        .map(|i| {
            let key = Key::from_class(i % Key::COUNT).expect("class in range");
            let timbre_family = ((i + i / Key::COUNT) % GENRE_NAMES.len()) as u8;
            let mut tags = 0u8;
            for bit in 0..8 {
                if rng.gen_bool(cfg.tag_probability) {
                    tags |= 1 << bit;
                }
            }
            ClipSpec {
                key,
                tempo: rng.gen_range(TEMPO_RANGE.0..=TEMPO_RANGE.1),
                timbre_family,
                active_tags: tags,
                loudness: rng.gen_range(LOUDNESS_RANGE.0..=LOUDNESS_RANGE.1),
                duration_s: cfg.duration_s,
                seed: rng.gen(),
            }
        })
        .collect();
    // Interleave the shuffled per-key groups so that any prefix stays
    // balanced over keys, then cut valid and test off the front.
    let groups: Vec<Vec<usize>> = (0..Key::COUNT)
        .map(|class| {
            let mut members: Vec<usize> = (class..cfg.n_clips).step_by(Key::COUNT).collect();
            rand::seq::SliceRandom::shuffle(&mut members[..], &mut rng);
            members
        })
        .collect();
    let order: Vec<usize> = (0..groups[0].len()).flat_map(|j| groups.iter().filter_map(move |g| g.get(j).copied())).collect();
    let n = cfg.n_clips as f64;
    let n_valid = (n * cfg.split_ratios[1]).round() as usize;
    let n_test = ((n * cfg.split_ratios[2]).round() as usize).min(order.len() - n_valid);
    let mut splits: [Vec<usize>; 3] = [
        order[n_valid + n_test..].to_vec(),
        order[..n_valid].to_vec(),
        order[n_valid..n_valid + n_test].to_vec(),
    ];
    for s in &mut splits {
        s.sort_unstable();
    }
    Ok((specs, splits))
}

/// Renders the corpus into `out_dir/wav/` and writes `train.jsonl`,
/// `valid.jsonl` and `test.jsonl` manifests with paths relative to `out_dir`.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<CorpusSummary, SynthError> {
    let (specs, split_idx) = plan_corpus(cfg)?;
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|source| SynthError::Io { path: wav_dir.display().to_string(), source })?;
    let mut records = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let (mut wave, labels) = generate_clip(spec)?;
        let name = format!("clip_{i:05}");
        wave.source_id = name.clone();
        write_wav_file(&wav_dir.join(format!("{name}.wav")), &wave)?;
        records.push(ManifestRecord { path: format!("wav/{name}.wav"), labels: labels.to_manifest_labels() });
    }
    let splits = split_idx.map(|idx| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>());
    for (name, recs) in SPLITS.iter().zip(&splits) {
        write_manifest(&out_dir.join(format!("{name}.jsonl")), recs)?;
    }
    Ok(CorpusSummary { splits, specs })
}
