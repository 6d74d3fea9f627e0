//! Waveform ingestion: WAV parsing, cropping, per-clip normalization and the
//! dataset manifest.

mod manifest;
mod wav;

pub use manifest::{load_clips, read_manifest, write_manifest, ClipLabels, ManifestRecord};
pub use wav::{read_wav, read_wav_file, write_wav, write_wav_file};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV: {0}")]
    Format(String),
    #[error("unsupported sample rate {0} Hz (expected 16000, no resampling)")]
    Rate(u32),
    #[error("clip `{source_id}` has {got} samples, {needed} required")]
    TooShort { source_id: String, needed: usize, got: usize },
    #[error("invalid waveform: {0}")]
    Invalid(String),
    #[error("manifest {path}:{line}: {message}")]
    Manifest { path: String, line: usize, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mono PCM samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self, AudioError> {
        let w = Waveform { samples, sample_rate, source_id: source_id.into() };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        if self.sample_rate == 0 {
            return Err(AudioError::Invalid("sample rate must be positive".into()));
        }
        if self.samples.is_empty() {
            return Err(AudioError::Invalid(format!("`{}` has no samples", self.source_id)));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(AudioError::Invalid(format!("`{}` has non-finite samples", self.source_id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// A contiguous slice of a parent waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct Excerpt {
    pub source_id: String,
    pub offset: usize,
    pub length: usize,
    pub samples: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropPolicy {
    /// Offset drawn uniformly over every valid start from this seed.
    Random(u64),
    Start,
}

/// Number of samples in a crop of `seconds` at `sample_rate`.
pub fn crop_len(seconds: f64, sample_rate: u32) -> Result<usize, AudioError> {
    let exact = seconds * sample_rate as f64;
    if !(exact >= 1.0) || (exact - exact.round()).abs() > 1e-6 {
        return Err(AudioError::Invalid(format!(
            "crop of {seconds} s is not a positive whole number of samples at {sample_rate} Hz"
        )));
    }
    Ok(exact.round() as usize)
}

pub fn crop_excerpt(w: &Waveform, crop_seconds: f64, policy: CropPolicy) -> Result<Excerpt, AudioError> {
    let length = crop_len(crop_seconds, w.sample_rate)?;
    if w.len() < length {
        return Err(AudioError::TooShort { source_id: w.source_id.clone(), needed: length, got: w.len() });
    }
    let max_offset = w.len() - length;
    let offset = match policy {
        CropPolicy::Start => 0,
        CropPolicy::Random(seed) => ChaCha8Rng::seed_from_u64(seed).gen_range(0..=max_offset),
    };
    Ok(Excerpt {
        source_id: w.source_id.clone(),
        offset,
        length,
        samples: w.samples[offset..offset + length].to_vec(),
    })
}

pub const VARIANCE_FLOOR: f64 = 1e-7;

/// Zero-mean, unit-variance samples (variance floored at 1e-7).
pub fn normalize_samples(samples: &[f32]) -> Result<Vec<f32>, AudioError> {
    if samples.len() < 2 {
        return Err(AudioError::Invalid("normalization needs at least 2 samples".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = samples.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.max(VARIANCE_FLOOR).sqrt();
    Ok(samples.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect())
}

pub fn normalize_clip(w: &Waveform) -> Result<Waveform, AudioError> {
    Ok(Waveform { samples: normalize_samples(&w.samples)?, ..w.clone() })
}
