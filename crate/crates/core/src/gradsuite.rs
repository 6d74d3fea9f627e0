//! Finite-difference checks of every differentiable op and of the full desk
//! encoder, shared by the `gradcheck` subcommand and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{forward_with, EncoderConfig, EncoderError};
use crate::masking::MaskSet;
use crate::numerics::{grad_check, nudge_off_kinks, Graph, NumericsError, Tensor, Var};

/// Step used for the central differences.
pub const SUITE_EPS: f64 = 1e-4;
/// Largest accepted relative error.
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < SUITE_TOLERANCE
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Contracts an op output with fixed random weights.
fn reduce(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.value(y).shape(), &mut rng);
    g.dot(y, &w)
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>>;

/// Runs the op checks and then the encoder check.
pub fn run_gradcheck_suite(seed: u64) -> Result<Vec<SuiteEntry>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, c) = (5usize, 6usize);
    let x = random(&[t, c], &mut rng);
    let target = random(&[t, c], &mut rng).map(|v| 2.0 * v);
    let mut pred = random(&[t, c], &mut rng).map(|v| 2.0 * v);
    nudge_off_kinks(&mut pred, &target, 1.0, SUITE_EPS);

    let ops: Vec<(&str, Vec<Tensor<f64>>, OpFn)> = vec![
        ("linear", vec![x.clone(), random(&[3, c], &mut rng), random(&[3], &mut rng)], Box::new(|g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            reduce(g, y, 1)
        })),
        ("add_row", vec![x.clone(), random(&[c], &mut rng)], Box::new(|g, v| {
            let y = g.add_row(v[0], v[1])?;
            reduce(g, y, 2)
        })),
        ("add", vec![x.clone(), random(&[t, c], &mut rng)], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            reduce(g, y, 3)
        })),
        ("scale", vec![x.clone()], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7)?;
            reduce(g, y, 4)
        })),
        ("layer_norm", vec![x.clone(), random(&[c], &mut rng), random(&[c], &mut rng)], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            reduce(g, y, 5)
        })),
        ("group_norm", vec![x.clone(), random(&[c], &mut rng), random(&[c], &mut rng)], Box::new(|g, v| {
            let y = g.group_norm(v[0], v[1], v[2], 2)?;
            reduce(g, y, 6)
        })),
        ("gelu", vec![x.map(|v| 2.5 * v)], Box::new(|g, v| {
            let y = g.gelu(v[0])?;
            reduce(g, y, 7)
        })),
        ("softmax", vec![x.clone()], Box::new(|g, v| {
            let y = g.softmax(v[0])?;
            reduce(g, y, 8)
        })),
        ("pad_time", vec![x.clone()], Box::new(|g, v| {
            let y = g.pad_time(v[0], 2, 1)?;
            reduce(g, y, 9)
        })),
        ("attention", vec![x.clone(), random(&[t, c], &mut rng), random(&[t, c], &mut rng)], Box::new(|g, v| {
            let y = g.attention(v[0], v[1], v[2], 2)?;
            reduce(g, y, 10)
        })),
        ("dropout", vec![x.clone()], Box::new(|g, v| {
            // Fixed seed, so every evaluation samples the same mask.
            *g = std::mem::take(g).with_training(9);
            let y = g.dropout(v[0], 0.3)?;
            reduce(g, y, 11)
        })),
        ("replace_rows", vec![x.clone(), random(&[c], &mut rng)], Box::new(|g, v| {
            let y = g.replace_rows(v[0], &[0, 2], v[1])?;
            reduce(g, y, 12)
        })),
        ("conv1d", vec![random(&[t + 6, c], &mut rng), random(&[c, c, 3], &mut rng)], Box::new(|g, v| {
            let y = g.conv1d(v[0], v[1], 2, 1)?;
            reduce(g, y, 13)
        })),
        ("conv1d_grouped", vec![random(&[t + 6, c], &mut rng), random(&[c, c / 2, 2], &mut rng)], Box::new(|g, v| {
            let y = g.conv1d(v[0], v[1], 1, 2)?;
            reduce(g, y, 14)
        })),
        ("smooth_l1", vec![pred], Box::new(move |g, v| g.smooth_l1(v[0], &target, Some(&[0, t - 1]), 1.0))),
    ];

    let mut out = Vec::new();
    for (name, point, f) in ops {
        let r = grad_check(f, &point, SUITE_EPS, None, seed)?;
        out.push(SuiteEntry { name: name.into(), max_rel_error: r.max_rel_error, checked: r.checked });
    }
    out.push(encoder_check(seed)?);
    Ok(out)
}

/// The 2-layer desk encoder end to end on a short masked input, with 16
/// sampled coordinates per parameter tensor.
fn encoder_check(seed: u64) -> Result<SuiteEntry, NumericsError> {
    let cfg = EncoderConfig::desk();
    let to_num = |e: EncoderError| match e {
        EncoderError::Numerics(n) => n,
        other => NumericsError::Config(other.to_string()),
    };
    let params = cfg.init_params(seed).map_err(to_num)?.cast::<f64>();
    let names: Vec<String> = params.names().to_vec();
    let point: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let samples: Vec<f64> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let t = cfg.output_length(samples.len()).map_err(to_num)?;
    let mask = MaskSet::from_indices(t, vec![1, 2]).map_err(|e| NumericsError::Config(e.to_string()))?;
    let w = random(&[t, cfg.hidden], &mut rng);
    let r = grad_check(
        |g: &mut Graph<f64>, vars| {
            let leaves = names.iter().cloned().zip(vars.iter().copied()).collect();
            let out = forward_with(g, &cfg, leaves, &samples, Some(&mask)).map_err(to_num)?;
            g.dot(out.prediction, &w)
        },
        &point,
        SUITE_EPS,
        Some(16),
        seed,
    )?;
    Ok(SuiteEntry { name: "desk_encoder".into(), max_rel_error: r.max_rel_error, checked: r.checked })
}
