use m2v_core::audio::Waveform;
use m2v_core::distiller::{ema_update, tau_schedule};
use m2v_core::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn clips(n: usize, seconds: f64) -> Vec<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..n)
        .map(|i| {
            let len = (seconds * 16_000.0) as usize;
            let f = 0.02 + 0.01 * i as f32;
            let s = (0..len).map(|t| (t as f32 * f).sin() * 0.5 + rng.gen_range(-0.1..0.1)).collect();
            Waveform::new(s, 16_000, format!("c{i}")).unwrap()
        })
        .collect()
}

/// Desk encoder on short crops so runs take seconds.
fn small(total: u64) -> TrainConfig {
    TrainConfig { crop_seconds: 0.5, batch_audio_budget_seconds: 1.0, total_steps: total, checkpoint_every: 50, ..Default::default() }
}

#[test]
fn step_zero_loss_is_finite_and_positive() {
    let cfg = small(1);
    let data = clips(4, 1.0);
    let mut state = TrainState::new(&cfg).unwrap();
    let batch = compose_batch(&data, &cfg, 0).unwrap();
    let rec = train_step(&mut state, &cfg, &batch, 1).unwrap();
    assert!(rec.loss.is_finite() && rec.loss > 0.0, "{}", rec.loss);
    assert_eq!(rec.step, 1);
}

#[test]
fn ten_steps_are_deterministic_and_thread_independent() {
    let cfg = small(10);
    let data = clips(6, 1.0);
    let run = |threads| {
        let mut state = TrainState::new(&cfg).unwrap();
        let mut losses = Vec::new();
        for _ in 0..10 {
            let batch = compose_batch(&data, &cfg, state.step()).unwrap();
            losses.push(train_step(&mut state, &cfg, &batch, threads).unwrap().loss.to_bits());
        }
        (losses, Checkpoint::from_state(&cfg, &state).to_bytes())
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(2));
}

#[test]
fn teacher_moves_only_by_ema() {
    let cfg = small(3);
    let data = clips(4, 1.0);
    let mut state = TrainState::new(&cfg).unwrap();
    for _ in 0..3 {
        let before = state.distill.teacher.clone();
        let batch = compose_batch(&data, &cfg, state.step()).unwrap();
        let rec = train_step(&mut state, &cfg, &batch, 1).unwrap();
        let mut expected = before;
        ema_update(&mut expected, &state.distill.student, tau_schedule(rec.step - 1, &cfg.ema)).unwrap();
        assert_eq!(param_fingerprint(&expected), param_fingerprint(&state.distill.teacher));
        assert_eq!(rec.tau, tau_schedule(rec.step - 1, &cfg.ema));
    }
}

#[test]
fn checkpoints_round_trip_and_resume_bitwise() {
    let cfg = small(100);
    let data = clips(6, 1.0);
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let out = run_pretrain(&cfg, &data, &full, &RunOptions { threads: 1, ..Default::default() }).unwrap();
    assert_eq!(out.checkpoints, vec![checkpoint_path(&full, 50), checkpoint_path(&full, 100)]);

    let bytes = std::fs::read(&out.checkpoints[0]).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.step, 50);
    assert_eq!(ck.to_bytes(), bytes);
    let resaved = dir.path().join("resaved.m2v");
    Checkpoint::load(&out.checkpoints[0]).unwrap().save(&resaved).unwrap();
    assert_eq!(std::fs::read(&resaved).unwrap(), bytes);

    let resumed = dir.path().join("resumed");
    std::fs::create_dir_all(resumed.join("checkpoints")).unwrap();
    let opts = RunOptions { threads: 1, resume: Some(out.checkpoints[0].clone()), progress_every: 0 };
    let tail = run_pretrain(&cfg, &data, &resumed, &opts).unwrap();
    let losses = |r: &[StepRecord]| r.iter().map(|x| (x.step, x.loss.to_bits())).collect::<Vec<_>>();
    assert_eq!(losses(&tail.records), losses(&out.records[50..]));
    assert_eq!(tail.checkpoints, vec![checkpoint_path(&resumed, 100)]);
    assert_eq!(std::fs::read(&tail.checkpoints[0]).unwrap(), std::fs::read(&out.checkpoints[1]).unwrap());

    let logged = read_metrics(&metrics_path(&full)).unwrap();
    assert_eq!(logged.len(), 100);
    assert_eq!(logged, out.records);

    let other = TrainConfig { lr: 1e-3, ..cfg.clone() };
    assert!(matches!(run_pretrain(&other, &data, &resumed, &opts), Err(TrainError::Config(_))));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = small(1);
    let bytes = Checkpoint::from_state(&cfg, &TrainState::new(&cfg).unwrap()).to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn warmup_peaks_at_the_stated_step() {
    for (total, frac) in [(2000u64, 0.05), (100, 0.1), (7, 0.3)] {
        let cfg = TrainConfig { total_steps: total, warmup_fraction: frac, ..Default::default() };
        let w = (frac * total as f64).ceil() as u64;
        assert_eq!(cfg.lr_at(w), cfg.lr, "total {total}");
        assert!(cfg.lr_at(w + 1) < cfg.lr);
        assert!(cfg.lr_at(total) > 0.0);
    }
}

#[test]
fn grid_keeps_the_audio_budget() {
    let base = TrainConfig::default();
    let grid = make_ablation_grid(&base);
    let labels: Vec<&str> = grid.iter().map(|e| e.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "Starting Setting", "Length Crop 5s", "Length Crop 10s", "Length Crop 15s", "Mask Span 5", "Mask Span 15",
            "Mask Prob 50%", "Mask Prob 70%", "Mask Prob 80%", "Target Top-12", "Step 800K"
        ]
    );
    for e in &grid {
        assert_eq!(e.config.batch_audio_budget_seconds, base.batch_audio_budget_seconds);
        assert!(e.config.batch_size() as f64 * e.config.crop_seconds <= e.config.batch_audio_budget_seconds + 1e-9);
        assert_eq!(config_diff(&base, &e.config).len(), usize::from(e.id != "base"), "{}", e.id);
    }
    let sizes: Vec<usize> = grid[..4].iter().map(|e| e.config.batch_size()).collect();
    assert_eq!(sizes, [20, 120, 60, 40]);
    assert_eq!(grid[10].config.total_steps, 2 * base.total_steps);
}
