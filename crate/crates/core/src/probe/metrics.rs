//! Evaluation metrics and checkpoint selection.

use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::synth::{Key, Mode};

fn check_len(a: usize, b: usize) -> Result<(), ProbeError> {
    if a != b {
        return Err(ProbeError::Metric(format!("length mismatch: {a} scores vs {b} labels")));
    }
    Ok(())
}

/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` via average ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, ProbeError> {
    check_len(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(ProbeError::Metric("roc_auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-wise average precision; tied scores form one threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, ProbeError> {
    check_len(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(ProbeError::Metric("average_precision needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let hits = order[i..=j].iter().filter(|&&k| labels[k]).count();
        tp += hits;
        seen += j - i + 1;
        ap += hits as f64 * tp as f64 / seen as f64;
        i = j + 1;
    }
    Ok(ap / pos as f64)
}

/// Macro average over columns of an `n×k` score matrix; columns lacking a
/// class are excluded and reported.
pub fn macro_metric(
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
    metric: fn(&[f64], &[bool]) -> Result<f64, ProbeError>,
) -> Result<(f64, Vec<usize>), ProbeError> {
    check_len(scores.len(), labels.len())?;
    let k = labels.first().map_or(0, Vec::len);
    let (mut total, mut used, mut skipped) = (0.0, 0, Vec::new());
    for c in 0..k {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        match metric(&s, &l) {
            Ok(v) => {
                total += v;
                used += 1;
            }
            Err(_) => skipped.push(c),
        }
    }
    if used == 0 {
        return Err(ProbeError::Metric("no column has both classes".into()));
    }
    if !skipped.is_empty() {
        log::warn!("{} single-class column(s) excluded from the macro average", skipped.len());
    }
    Ok((total / used as f64, skipped))
}

/// `1 − SS_res / SS_tot`.
pub fn r2(y: &[f64], y_hat: &[f64]) -> Result<f64, ProbeError> {
    check_len(y_hat.len(), y.len())?;
    if y.len() < 2 {
        return Err(ProbeError::Metric("r2 needs at least two values".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(ProbeError::Metric("r2 undefined for constant targets".into()));
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> Result<f64, ProbeError> {
    check_len(pred.len(), truth.len())?;
    if truth.is_empty() {
        return Err(ProbeError::Metric("accuracy of zero items".into()));
    }
    Ok(truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
}

/// Partial credit per key relation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyScoreTable {
    pub exact: f64,
    pub fifth: f64,
    pub relative: f64,
    pub parallel: f64,
}

impl Default for KeyScoreTable {
    fn default() -> Self {
        KeyScoreTable { exact: 1.0, fifth: 0.5, relative: 0.3, parallel: 0.2 }
    }
}

fn key_of(class: usize) -> Result<Key, ProbeError> {
    Key::from_class(class).ok_or_else(|| ProbeError::Metric(format!("key class {class} outside 0..24")))
}

/// Weighted score of one estimate against the reference key.
pub fn key_weighted_score_with(reference: usize, estimate: usize, table: &KeyScoreTable) -> Result<f64, ProbeError> {
    let (r, e) = (key_of(reference)?, key_of(estimate)?);
    let up = (e.tonic + 12 - r.tonic) % 12;
    Ok(if r == e {
        table.exact
    } else if r.mode == e.mode && (up == 7 || up == 5) {
        table.fifth
    } else if r.mode != e.mode && ((r.mode == Mode::Major && up == 9) || (r.mode == Mode::Minor && up == 3)) {
        table.relative
    } else if r.mode != e.mode && up == 0 {
        table.parallel
    } else {
        0.0
    })
}

pub fn key_weighted_score(reference: usize, estimate: usize) -> Result<f64, ProbeError> {
    key_weighted_score_with(reference, estimate, &KeyScoreTable::default())
}

pub fn mean_key_score(reference: &[usize], estimate: &[usize]) -> Result<f64, ProbeError> {
    check_len(estimate.len(), reference.len())?;
    if reference.is_empty() {
        return Err(ProbeError::Metric("key score of zero items".into()));
    }
    let mut total = 0.0;
    for (&r, &e) in reference.iter().zip(estimate) {
        total += key_weighted_score(r, e)?;
    }
    Ok(total / reference.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Tagging,
    Genre,
    Key,
    Emotion,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Tagging, Task::Genre, Task::Key, Task::Emotion];

    pub fn name(self) -> &'static str {
        match self {
            Task::Tagging => "tagging",
            Task::Genre => "genre",
            Task::Key => "key",
            Task::Emotion => "emotion",
        }
    }
}

/// Validation metrics of one evaluated checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLog {
    pub step: u64,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub key_score: Option<f64>,
    pub r2_arousal: Option<f64>,
    pub r2_valence: Option<f64>,
}

impl CheckpointLog {
    /// The number a task's selection rule maximizes.
    pub fn selection_value(&self, task: Task) -> Option<f64> {
        match task {
            Task::Tagging => self.auc,
            Task::Genre => self.accuracy,
            Task::Key => self.key_score,
            Task::Emotion => Some((self.r2_arousal? + self.r2_valence?) / 2.0),
        }
    }
}

/// Step of the best checkpoint for `task`; ties go to the earliest step.
pub fn select_checkpoint(logs: &[CheckpointLog], task: Task) -> Result<u64, ProbeError> {
    let mut best: Option<(f64, u64)> = None;
    for log in logs {
        let Some(v) = log.selection_value(task) else { continue };
        best = match best {
            Some((bv, bs)) if bv > v || (bv == v && bs <= log.step) => Some((bv, bs)),
            _ => Some((v, log.step)),
        };
    }
    best.map(|(_, s)| s)
        .ok_or_else(|| ProbeError::Metric(format!("no checkpoint log carries a {} metric", task.name())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 0.75);
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -3.0);
        assert_eq!(roc_auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(r2(&[1.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn key_table() {
        let c = |s: &str| s.parse::<Key>().unwrap().class();
        assert_eq!(key_weighted_score(c("C major"), c("C major")).unwrap(), 1.0);
        assert_eq!(key_weighted_score(c("C major"), c("G major")).unwrap(), 0.5);
        assert_eq!(key_weighted_score(c("C major"), c("F major")).unwrap(), 0.5);
        assert_eq!(key_weighted_score(c("C major"), c("A minor")).unwrap(), 0.3);
        assert_eq!(key_weighted_score(c("A minor"), c("C major")).unwrap(), 0.3);
        assert_eq!(key_weighted_score(c("C major"), c("C minor")).unwrap(), 0.2);
        assert_eq!(key_weighted_score(c("C major"), c("D major")).unwrap(), 0.0);
        assert!(key_weighted_score(24, 0).is_err());
    }

    #[test]
    fn selection_rules() {
        let logs: Vec<CheckpointLog> = [0.6, 0.7, 0.65]
            .iter()
            .enumerate()
            .map(|(i, &auc)| CheckpointLog { step: i as u64 + 1, auc: Some(auc), ..Default::default() })
            .collect();
        assert_eq!(select_checkpoint(&logs, Task::Tagging).unwrap(), 2);
        assert!(select_checkpoint(&[], Task::Tagging).is_err());
    }
}
