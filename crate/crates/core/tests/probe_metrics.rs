use m2v_core::probe::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

#[test]
fn auc_matches_pairwise_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (s, l) = instance(&mut rng);
        assert!((roc_auc(&s, &l).unwrap() - auc_pairs(&s, &l)).abs() < 1e-9);
    }
}

#[test]
fn ap_matches_threshold_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (s, l) = instance(&mut rng);
        assert!((average_precision(&s, &l).unwrap() - ap_sweep(&s, &l)).abs() < 1e-9);
    }
}

#[test]
fn r2_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.gen_range(2..30);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        assert!((r2(&y, &p).unwrap() - r2_direct(&y, &p)).abs() < 1e-9);
    }
}

#[test]
fn key_score_matches_table_lookup() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let (r, e) = (rng.gen_range(0..24), rng.gen_range(0..24));
        assert_eq!(key_weighted_score(r, e).unwrap(), key_lookup(r, e));
    }
    for r in 0..24 {
        for e in 0..24 {
            assert_eq!(key_weighted_score(r, e).unwrap(), key_lookup(r, e), "{r} {e}");
        }
    }
}

#[test]
fn worked_examples_reproduce() {
    assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
    assert_eq!(roc_auc(&[1.0, 2.0, 3.0], &[false, true, true]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
    assert!((average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap() - 0.8333333333333334).abs() < 1e-12);
    assert_eq!(average_precision(&[0.9, 0.5, 0.2, 0.1], &[false, false, false, true]).unwrap(), 0.25);
    assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
    assert_eq!(r2(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -3.0);
    assert_eq!(r2(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
    assert_eq!(r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
    assert!(r2(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    let c = |s: &str| s.parse::<m2v_core::synth::Key>().unwrap().class();
    for (a, b, v) in [("C major", "C major", 1.0), ("C major", "G major", 0.5), ("C major", "A minor", 0.3), ("C major", "C minor", 0.2), ("C major", "D major", 0.0)] {
        assert_eq!(key_weighted_score(c(a), c(b)).unwrap(), v, "{a} vs {b}");
    }
}

#[test]
fn single_class_tags_are_excluded_from_macro() {
    let scores = vec![vec![0.1, 0.9], vec![0.8, 0.2], vec![0.3, 0.7]];
    let labels = vec![vec![false, true], vec![true, true], vec![false, true]];
    let (auc, skipped) = macro_metric(&scores, &labels, roc_auc).unwrap();
    assert_eq!(auc, 1.0);
    assert_eq!(skipped, vec![1]);
}

#[test]
fn checkpoint_selection_rules() {
    let log = |step, auc: f64| CheckpointLog { step, auc: Some(auc), ..Default::default() };
    assert_eq!(select_checkpoint(&[log(1, 0.6), log(2, 0.7), log(3, 0.65)], Task::Tagging).unwrap(), 2);
    assert_eq!(select_checkpoint(&[log(5, 0.7), log(9, 0.7)], Task::Tagging).unwrap(), 5);
    assert_eq!(select_checkpoint(&[log(9, 0.7), log(5, 0.7)], Task::Tagging).unwrap(), 5);
    let emo = |step, a, v| CheckpointLog { step, r2_arousal: Some(a), r2_valence: Some(v), ..Default::default() };
    assert_eq!(select_checkpoint(&[emo(1, 0.1, 0.5), emo(2, 0.4, 0.3)], Task::Emotion).unwrap(), 2);
    let other = |step, acc, key| CheckpointLog { step, accuracy: Some(acc), key_score: Some(key), ..Default::default() };
    let logs = [other(1, 0.5, 0.9), other(2, 0.8, 0.1)];
    assert_eq!(select_checkpoint(&logs, Task::Genre).unwrap(), 2);
    assert_eq!(select_checkpoint(&logs, Task::Key).unwrap(), 1);
    assert!(select_checkpoint(&[], Task::Emotion).is_err());
}

#[test]
fn average_column_of_a_reference_row() {
    let s = TaskScores {
        tagging: Some(TaggingScores { auc: 0.895, ap: 0.359 }),
        genre: Some(GenreScores { accuracy: 0.766 }),
        key: Some(KeyScores { weighted_score: 0.501 }),
        emotion: Some(EmotionScores { r2_arousal: 0.694, r2_valence: 0.574 }),
    };
    assert_eq!((s.average_percent().unwrap() * 10.0).round() / 10.0, 63.2);
}

#[test]
fn pooling_takes_column_means() {
    use m2v_core::numerics::Tensor;
    let x = Tensor::new(&[3, 2], vec![0.5f32, -1.0, 2.0, 4.0, -1.0, 0.25]).unwrap();
    let p = pool_features(&x).unwrap();
    assert!((p[0] - 0.5).abs() < 1e-7 && (p[1] - 1.0833334).abs() < 1e-6, "{p:?}");
}

fn blobs(n: usize, d: usize, seed: u64, separable: bool) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % 2;
        let shift = if separable { if c == 0 { -3.0 } else { 3.0 } } else { 0.0 };
        rows.push((0..d).map(|j| rng.gen_range(-1.0..1.0) + if j == 0 { shift } else { 0.0 }).collect::<Vec<f64>>());
        labels.push(c);
    }
    (Matrix::from_rows(&rows), labels)
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

fn genre_probe(x: &Matrix, y: &[usize], xv: &Matrix, yv: &[usize]) -> FittedProbe {
    let l = TaskLabels::Class { labels: y.to_vec(), names: names(2) };
    let lv = TaskLabels::Class { labels: yv.to_vec(), names: names(2) };
    fit_probe(Task::Genre, (x, &l), (xv, &lv), &ProbeConfig::default()).unwrap()
}

#[test]
fn separable_classes_reach_full_accuracy() {
    let (x, y) = blobs(40, 4, 1, true);
    let (xv, yv) = blobs(20, 4, 2, true);
    assert_eq!(genre_probe(&x, &y, &xv, &yv).valid_score, 1.0);
}

#[test]
fn fitting_is_deterministic() {
    let (x, y) = blobs(30, 3, 5, false);
    let (xv, yv) = blobs(12, 3, 6, false);
    let a = genre_probe(&x, &y, &xv, &yv);
    let b = genre_probe(&x, &y, &xv, &yv);
    assert_eq!(a.l2, b.l2);
    assert_eq!(a.head.predict(&xv), b.head.predict(&xv));
}

#[test]
fn degenerate_training_labels_name_the_class() {
    let (x, _) = blobs(20, 3, 7, false);
    let l = TaskLabels::Class { labels: vec![1; 20], names: vec!["rock".into(), "jazz".into()] };
    match fit_probe(Task::Genre, (&x, &l), (&x, &l), &ProbeConfig::default()) {
        Err(ProbeError::Degenerate { class, .. }) => assert_eq!(class, "jazz"),
        other => panic!("expected a degenerate-label error, got {:?}", other.err()),
    }
    let rows: Vec<Vec<bool>> = (0..20).map(|i| vec![i % 2 == 0, true]).collect();
    let t = TaskLabels::MultiLabel { rows, names: vec!["bass".into(), "drone".into()] };
    match fit_probe(Task::Tagging, (&x, &t), (&x, &t), &ProbeConfig::default()) {
        Err(ProbeError::Degenerate { class, .. }) => assert_eq!(class, "drone"),
        other => panic!("expected a degenerate-label error, got {:?}", other.err()),
    }
}

#[test]
fn permuted_tags_give_chance_auc() {
    // Tags independent of features: median test AUC over seeds near 0.5.
    let mut aucs = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut make = |n: usize| {
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let y: Vec<Vec<bool>> = (0..n).map(|_| (0..4).map(|_| rng.gen_bool(0.5)).collect()).collect();
            (Matrix::from_rows(&x), TaskLabels::MultiLabel { rows: y, names: names(4) })
        };
        let (x, y) = make(200);
        let (xv, yv) = make(60);
        let (xt, yt) = make(200);
        let p = fit_probe(Task::Tagging, (&x, &y), (&xv, &yv), &ProbeConfig::default()).unwrap();
        let pred = p.head.predict(&xt);
        let rows: Vec<Vec<f64>> = (0..pred.rows).map(|i| pred.row(i).to_vec()).collect();
        let TaskLabels::MultiLabel { rows: labels, .. } = &yt else { unreachable!() };
        aucs.push(macro_metric(&rows, labels, roc_auc).unwrap().0);
    }
    aucs.sort_by(f64::total_cmp);
    assert!((aucs[2] - 0.5).abs() <= 0.1, "{aucs:?}");
}

#[test]
fn feature_cache_rejects_bad_input() {
    let c = FeatureCache { tap_id: 0x101, records: vec![("a".into(), vec![1.0, 2.0])] };
    let bytes = c.to_bytes();
    assert_eq!(&bytes[..4], FEATURE_MAGIC);
    assert_eq!(FeatureCache::from_bytes(&bytes).unwrap(), c);
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(FeatureCache::from_bytes(&bad).is_err());
}

proptest! {
    #[test]
    fn auc_and_ap_ignore_monotone_transforms(scores in prop::collection::vec(-5.0f64..5.0, 4..40), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<bool> = (0..scores.len()).map(|i| i % 2 == 0 || rng.gen_bool(0.3)).collect();
        prop_assume!(labels.iter().any(|&l| !l));
        let moved: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() * 3.0 + 1.0).collect();
        prop_assert!((roc_auc(&scores, &labels).unwrap() - roc_auc(&moved, &labels).unwrap()).abs() < 1e-12);
        prop_assert!((average_precision(&scores, &labels).unwrap() - average_precision(&moved, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn selection_ignores_log_order(values in prop::collection::vec(0u8..5, 1..12), rot in 0usize..12) {
        let logs: Vec<CheckpointLog> = values.iter().enumerate()
            .map(|(i, &v)| CheckpointLog { step: 10 * (i as u64 + 1), auc: Some(v as f64 / 4.0), ..Default::default() })
            .collect();
        let mut shuffled = logs.clone();
        shuffled.rotate_left(rot % logs.len());
        shuffled.reverse();
        prop_assert_eq!(select_checkpoint(&logs, Task::Tagging).unwrap(), select_checkpoint(&shuffled, Task::Tagging).unwrap());
    }
}
