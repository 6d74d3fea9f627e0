//! Span masks over frame indices.
//!
//! The number of spans is `n = max(ceil(min_masked / L), floor(p·T/L) + b)`
//! with `b ~ Bernoulli(frac(p·T/L))`, and span starts are drawn uniformly
//! without replacement from `[0, T − L]`. With `literal_bernoulli` set, every
//! start position is instead selected independently with probability `p`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("invalid mask config: {0}")]
    Config(String),
    #[error("sequence of {t} frames is shorter than span length {span}")]
    TooShort { t: usize, span: usize },
    #[error("mask index {index} out of range for {len} frames")]
    Index { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub mask_prob: f64,
    pub span_length: usize,
    pub min_masked: usize,
    pub literal_bernoulli: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { mask_prob: 0.65, span_length: 10, min_masked: 1, literal_bernoulli: false }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(MaskError::Config(format!("mask_prob {} outside (0, 1)", self.mask_prob)));
        }
        if self.span_length == 0 {
            return Err(MaskError::Config("span_length must be at least 1".into()));
        }
        if self.min_masked == 0 {
            return Err(MaskError::Config("min_masked must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of spans before the Bernoulli rounding term, and its fractional part.
    fn span_count_parts(&self, t: usize) -> (usize, f64) {
        let expected = self.mask_prob * t as f64 / self.span_length as f64;
        (expected.floor() as usize, expected.fract())
    }
}

/// Sorted, unique frame indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct MaskSet {
    indices: Vec<usize>,
    len: usize,
}

impl MaskSet {
    pub fn empty(t: usize) -> Self {
        MaskSet { indices: Vec::new(), len: t }
    }

    pub fn full(t: usize) -> Self {
        MaskSet { indices: (0..t).collect(), len: t }
    }

    pub fn from_indices(t: usize, mut indices: Vec<usize>) -> Result<Self, MaskError> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&index) = indices.last().filter(|&&i| i >= t) {
            return Err(MaskError::Index { index, len: t });
        }
        Ok(MaskSet { indices, len: t })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Sequence length the mask was drawn for.
    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn fraction(&self) -> f64 {
        self.indices.len() as f64 / self.len.max(1) as f64
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
}

/// Span starts chosen for a sequence of `t` frames.
pub fn sample_span_starts(t: usize, cfg: &MaskConfig, seed: u64) -> Result<Vec<usize>, MaskError> {
    cfg.validate()?;
    let l = cfg.span_length;
    if t < l {
        return Err(MaskError::TooShort { t, span: l });
    }
    let positions = t - l + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_spans = cfg.min_masked.div_ceil(l);
    let mut starts = if cfg.literal_bernoulli {
        let mut s: Vec<usize> = (0..positions).filter(|_| rng.gen_bool(cfg.mask_prob)).collect();
        if s.len() < min_spans {
            s = rand::seq::index::sample(&mut rng, positions, min_spans.min(positions)).into_vec();
        }
        s
    } else {
        let (whole, frac) = cfg.span_count_parts(t);
        let n = (whole + usize::from(rng.gen_bool(frac))).max(min_spans).min(positions);
        rand::seq::index::sample(&mut rng, positions, n).into_vec()
    };
    starts.sort_unstable();
    Ok(starts)
}

pub fn sample_mask(t: usize, cfg: &MaskConfig, seed: u64) -> Result<MaskSet, MaskError> {
    let starts = sample_span_starts(t, cfg, seed)?;
    let mut covered = vec![false; t];
    for s in starts {
        covered[s..s + cfg.span_length].iter_mut().for_each(|c| *c = true);
    }
    Ok(MaskSet { indices: (0..t).filter(|&i| covered[i]).collect(), len: t })
}

/// Replaces masked rows of a `T×H` token matrix with `embedding`.
pub fn apply_mask(features: &Tensor, mask: &MaskSet, embedding: &[f32]) -> Result<Tensor, MaskError> {
    let (t, h) = features.dims2().map_err(|e| MaskError::Shape(e.to_string()))?;
    if embedding.len() != h {
        return Err(MaskError::Shape(format!("embedding of {} for hidden size {h}", embedding.len())));
    }
    if let Some(&index) = mask.indices().last().filter(|&&i| i >= t) {
        return Err(MaskError::Index { index, len: t });
    }
    let mut out = features.clone();
    for &i in mask.indices() {
        out.data_mut()[i * h..(i + 1) * h].copy_from_slice(embedding);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_probability_gives_one_span() {
        let cfg = MaskConfig { mask_prob: 1e-9, ..Default::default() };
        for seed in 0..20 {
            let m = sample_mask(100, &cfg, seed).unwrap();
            assert_eq!(m.count(), 10);
            let first = m.indices()[0];
            assert_eq!(m.indices(), (first..first + 10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn twenty_frames_half_probability() {
        let cfg = MaskConfig { mask_prob: 0.5, ..Default::default() };
        for seed in 0..20 {
            assert_eq!(sample_mask(20, &cfg, seed).unwrap().count(), 10);
        }
    }

    #[test]
    fn short_sequence_is_an_error() {
        assert_eq!(sample_mask(9, &MaskConfig::default(), 0), Err(MaskError::TooShort { t: 9, span: 10 }));
    }

    #[test]
    fn literal_reading_masks_nearly_everything() {
        let cfg = MaskConfig { literal_bernoulli: true, ..Default::default() };
        let m = sample_mask(1499, &cfg, 1).unwrap();
        assert!(m.fraction() > 0.99);
    }

    #[test]
    fn apply_mask_locality() {
        let x = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = MaskSet::from_indices(3, vec![0]).unwrap();
        let y = apply_mask(&x, &m, &[9.0, 9.0]).unwrap();
        assert_eq!(y.data(), &[9.0, 9.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(apply_mask(&x, &MaskSet::empty(3), &[0.0, 0.0]).unwrap(), x);
        let bad = MaskSet { indices: vec![3], len: 3 };
        assert!(matches!(apply_mask(&x, &bad, &[0.0, 0.0]), Err(MaskError::Index { index: 3, .. })));
    }
}
