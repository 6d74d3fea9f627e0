use m2v_core::synth::{
    derive_labels, generate_clip, generate_corpus, plan_corpus, ClipSpec, CorpusConfig, Key, Mode, SynthError,
};
use proptest::prelude::*;

const SR: usize = 16_000;

/// Magnitude of DFT bin `k` of `x` by direct summation (Goertzel recurrence).
fn dft_mag(x: &[f32], k: usize) -> f64 {
    let w = 2.0 * std::f64::consts::PI * k as f64 / x.len() as f64;
    let c = 2.0 * w.cos();
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    for &v in x {
        let s0 = v as f64 + c * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    (s1 * s1 + s2 * s2 - c * s1 * s2).max(0.0).sqrt()
}

/// Average 1-second-frame magnitude spectrum, 1 Hz bins up to `max_hz`.
fn spectrum(x: &[f32], max_hz: usize) -> Vec<f64> {
    let frames: Vec<&[f32]> = x.chunks_exact(SR).collect();
    (0..=max_hz).map(|k| frames.iter().map(|f| dft_mag(f, k)).sum::<f64>() / frames.len() as f64).collect()
}

fn hz(midi: i32) -> f64 {
    440.0 * 2f64.powf((midi as f64 - 69.0) / 12.0)
}

fn pure_spec(key: Key, timbre: u8, tempo: f64) -> ClipSpec {
    ClipSpec { key, tempo, timbre_family: timbre, active_tags: 0, loudness: 0.1, duration_s: 5.0, seed: 17 }
}

#[test]
fn c_major_peaks_sit_on_diatonic_pitches() {
    let key = Key::new(0, Mode::Major).unwrap();
    let (w, _) = generate_clip(&pure_spec(key, 0, 60.0)).unwrap();
    let spec = spectrum(&w.samples, 4000);
    let top = spec.iter().cloned().fold(0.0, f64::max);
    let diatonic = [0, 2, 4, 5, 7, 9, 11];
    let mut peaks = 0;
    for k in 1..spec.len() - 1 {
        if spec[k] > 0.1 * top && spec[k] >= spec[k - 1] && spec[k] >= spec[k + 1] {
            peaks += 1;
            let near = (24..120)
                .filter(|m| diatonic.contains(&(m % 12)))
                .any(|m| (hz(m) - k as f64).abs() <= 1.0);
            assert!(near, "peak at {k} Hz is not a C-major pitch");
        }
    }
    assert!(peaks >= 3, "only {peaks} peaks");
}

fn key_profile(mode: Mode) -> [f64; 12] {
    // Krumhansl-Kessler probe-tone ratings.
    match mode {
        Mode::Major => [6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88],
        Mode::Minor => [6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17],
    }
}

fn correlation(a: &[f64; 12], b: &[f64; 12]) -> f64 {
    let ma = a.iter().sum::<f64>() / 12.0;
    let mb = b.iter().sum::<f64>() / 12.0;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn classify(samples: &[f32]) -> Key {
    let frames: Vec<&[f32]> = samples.chunks_exact(SR).collect();
    let mut chroma = [0.0; 12];
    for m in 36..108 {
        let k = hz(m).round() as usize;
        chroma[(m % 12) as usize] += frames.iter().map(|f| dft_mag(f, k)).sum::<f64>().powi(2);
    }
    (0..24)
        .map(|c| Key::from_class(c).unwrap())
        .max_by(|a, b| {
            let score = |k: &Key| {
                let p = key_profile(k.mode);
                let rotated: [f64; 12] = std::array::from_fn(|i| p[(i + 12 - k.tonic as usize) % 12]);
                correlation(&chroma, &rotated)
            };
            score(a).partial_cmp(&score(b)).unwrap()
        })
        .unwrap()
}

#[test]
fn template_classifier_recovers_every_key() {
    let mut wrong = Vec::new();
    for class in 0..24 {
        let key = Key::from_class(class).unwrap();
        for timbre in 0..4u8 {
            let tempo = 60.0 + 37.0 * timbre as f64;
            let (w, labels) = generate_clip(&pure_spec(key, timbre, tempo)).unwrap();
            assert_eq!(labels.key, key);
            let got = classify(&w.samples);
            if got != key {
                wrong.push((key.to_string(), timbre, got.to_string()));
            }
        }
    }
    assert!(wrong.is_empty(), "misclassified: {wrong:?}");
}

#[test]
fn corpus_is_deterministic_and_stratified() {
    let cfg = CorpusConfig { n_clips: 24, split_ratios: [0.5, 0.25, 0.25], seed: 4, duration_s: 5.0, ..Default::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = generate_corpus(&cfg, a.path()).unwrap();
    generate_corpus(&cfg, b.path()).unwrap();
    for split in ["train", "valid", "test"] {
        let ma = std::fs::read(a.path().join(format!("{split}.jsonl"))).unwrap();
        let mb = std::fs::read(b.path().join(format!("{split}.jsonl"))).unwrap();
        assert_eq!(ma, mb);
    }
    assert_eq!(sa.splits.iter().map(Vec::len).sum::<usize>(), 24);
    let first = &sa.splits[0][0];
    let wave = m2v_core::audio::read_wav_file(&first.resolve(a.path())).unwrap();
    assert_eq!(wave.len(), 5 * SR);

    let (specs, splits) = plan_corpus(&CorpusConfig::default()).unwrap();
    assert_eq!([splits[0].len(), splits[1].len(), splits[2].len()], [192, 24, 24]);
    for class in 0..24 {
        assert!(specs.iter().filter(|s| s.key.class() == class).count() >= 8);
    }
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    std::fs::write(&file, b"x").unwrap();
    let cfg = CorpusConfig { n_clips: 24, duration_s: 5.0, ..Default::default() };
    assert!(matches!(generate_corpus(&cfg, &file), Err(SynthError::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn labels_are_a_function_of_the_spec(
        class in 0usize..24, tempo in 60.0f64..=180.0, timbre in 0u8..4, tags: u8,
        loudness in 0.05f64..=0.2, seed: u64,
    ) {
        let spec = ClipSpec { key: Key::from_class(class).unwrap(), tempo, timbre_family: timbre, active_tags: tags, loudness, duration_s: 5.0, seed };
        let (_, labels) = generate_clip(&spec).unwrap();
        prop_assert_eq!(&labels, &derive_labels(&spec));
        prop_assert!((0.0..=1.0).contains(&labels.arousal) && (0.0..=1.0).contains(&labels.valence));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn splits_partition_the_corpus(n in 24usize..400, seed: u64) {
        let cfg = CorpusConfig { n_clips: n, seed, ..Default::default() };
        let (_, splits) = plan_corpus(&cfg).unwrap();
        let mut all: Vec<usize> = splits.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let expect = (n as f64 * 0.1).round() as usize;
        prop_assert_eq!(splits[1].len(), expect);
        prop_assert_eq!(splits[2].len(), expect);
        // Interleaving keeps every key within one clip of the others.
        for s in &splits[1..] {
            let mut per_key = [0usize; 24];
            for &i in s {
                per_key[i % 24] += 1;
            }
            prop_assert!(per_key.iter().max().unwrap() - per_key.iter().min().unwrap() <= 1);
        }
    }
}
