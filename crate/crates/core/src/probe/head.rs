//! Small probe heads fitted with full-batch Adam in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Output nonlinearity and loss of a head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Independent sigmoids, binary cross-entropy.
    MultiLabel,
    /// Softmax, cross-entropy.
    MultiClass,
    /// Identity, squared error.
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadKind {
    Linear,
    Mlp { width: usize },
}

/// Dense `rows×cols` row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Matrix { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · w + b` with `w: cols×out`.
    fn affine(&self, w: &[f64], b: &[f64]) -> Matrix {
        let out = b.len();
        let mut y = Matrix::zeros(self.rows, out);
        for (xr, yr) in self.data.chunks(self.cols).zip(y.data.chunks_mut(out)) {
            yr.copy_from_slice(b);
            for (&xv, wr) in xr.iter().zip(w.chunks(out)) {
                for (yv, &wv) in yr.iter_mut().zip(wr) {
                    *yv += xv * wv;
                }
            }
        }
        y
    }
}

struct Layer {
    w: Vec<f64>,
    b: Vec<f64>,
    fan_in: usize,
}

impl Layer {
    fn new(fan_in: usize, fan_out: usize, rng: Option<&mut ChaCha8Rng>) -> Self {
        let w = match rng {
            Some(rng) => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect()
            }
            None => vec![0.0; fan_in * fan_out],
        };
        Layer { w, b: vec![0.0; fan_out], fan_in }
    }
}

/// A fitted (or in-training) probe.
pub struct Head {
    layers: Vec<Layer>,
    objective: Objective,
}

struct Moments {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Head {
    pub fn new(kind: HeadKind, inputs: usize, outputs: usize, objective: Objective, seed: u64) -> Self {
        let layers = match kind {
            HeadKind::Linear => vec![Layer::new(inputs, outputs, None)],
            HeadKind::Mlp { width } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let hidden = Layer::new(inputs, width, Some(&mut rng));
                let out = Layer::new(width, outputs, Some(&mut rng));
                vec![hidden, out]
            }
        };
        Head { layers, objective }
    }

    /// Activations of every layer; the last is the raw output (logits).
    fn activations(&self, x: &Matrix) -> Vec<Matrix> {
        let mut acts = vec![x.clone()];
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = acts.last().expect("input").affine(&l.w, &l.b);
            if i + 1 < self.layers.len() {
                y.data.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(y);
        }
        acts
    }

    /// Probabilities (classification) or values (regression).
    pub fn predict(&self, x: &Matrix) -> Matrix {
        let mut y = self.activations(x).pop().expect("output");
        match self.objective {
            Objective::MultiLabel => y.data.iter_mut().for_each(|v| *v = sigmoid(*v)),
            Objective::MultiClass => {
                for row in y.data.chunks_mut(y.cols) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    row.iter_mut().for_each(|v| {
                        *v = (*v - max).exp();
                        sum += *v;
                    });
                    row.iter_mut().for_each(|v| *v /= sum);
                }
            }
            Objective::Regression => {}
        }
        y
    }

    /// One full-batch Adam step on the mean loss plus `l2·Σ‖W‖²`.
    fn step(&mut self, x: &Matrix, y: &Matrix, l2: f64, lr: f64, mom: &mut Moments) {
        let acts = self.activations(x);
        let n = x.rows as f64;
        let out = acts.last().expect("output");
        let pred = self.predict(x);
        // d(mean loss)/d(logits) for each objective is (prediction − target)
        // up to the squared-error factor 2.
        let factor = if self.objective == Objective::Regression { 2.0 } else { 1.0 };
        let mut delta = Matrix {
            rows: out.rows,
            cols: out.cols,
            data: pred.data.iter().zip(&y.data).map(|(p, t)| factor * (p - t) / n).collect(),
        };
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[li];
            let outs = layer.b.len();
            let mut gw = vec![0.0; layer.fan_in * outs];
            let mut gb = vec![0.0; outs];
            for (xr, dr) in input.data.chunks(input.cols).zip(delta.data.chunks(outs)) {
                for (gwr, &xv) in gw.chunks_mut(outs).zip(xr) {
                    for (g, &d) in gwr.iter_mut().zip(dr) {
                        *g += xv * d;
                    }
                }
                gb.iter_mut().zip(dr).for_each(|(g, &d)| *g += d);
            }
            gw.iter_mut().zip(&layer.w).for_each(|(g, &w)| *g += 2.0 * l2 * w);
            if li > 0 {
                let mut next = Matrix::zeros(input.rows, input.cols);
                for ((nr, dr), xr) in next.data.chunks_mut(input.cols).zip(delta.data.chunks(outs)).zip(input.data.chunks(input.cols)) {
                    for ((nv, wr), &xv) in nr.iter_mut().zip(layer.w.chunks(outs)).zip(xr) {
                        if xv > 0.0 {
                            *nv = wr.iter().zip(dr).map(|(w, d)| w * d).sum();
                        }
                    }
                }
                delta = next;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        mom.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let c1 = 1.0 - b1.powi(mom.t);
        let c2 = 1.0 - b2.powi(mom.t);
        let mut slot = 0;
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grads) {
            for (param, grad) in [(&mut layer.w, gw), (&mut layer.b, gb)] {
                let (m, v) = (&mut mom.m[slot], &mut mom.v[slot]);
                for (((p, g), mv), vv) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mv = b1 * *mv + (1.0 - b1) * g;
                    *vv = b2 * *vv + (1.0 - b2) * g * g;
                    *p -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                }
                slot += 1;
            }
        }
    }

    fn moments(&self) -> Moments {
        let shapes: Vec<usize> = self.layers.iter().flat_map(|l| [l.w.len(), l.b.len()]).collect();
        Moments { m: shapes.iter().map(|&n| vec![0.0; n]).collect(), v: shapes.iter().map(|&n| vec![0.0; n]).collect(), t: 0 }
    }

    fn snapshot(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers.iter().map(|l| (l.w.clone(), l.b.clone())).collect()
    }

    fn restore(&mut self, snap: Vec<(Vec<f64>, Vec<f64>)>) {
        for (l, (w, b)) in self.layers.iter_mut().zip(snap) {
            l.w = w;
            l.b = b;
        }
    }
}

/// Optimization settings shared by every head.
#[derive(Clone, Copy, Debug)]
pub struct FitSettings {
    pub l2: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
}

/// Trains on `(x, y)`, keeping the weights with the best `score` on the
/// validation set (higher is better), and stopping after `patience`
/// evaluations without improvement. Returns the head and its best score.
pub fn fit_head(
    mut head: Head,
    x: &Matrix,
    y: &Matrix,
    settings: &FitSettings,
    score: &dyn Fn(&Head) -> f64,
) -> (Head, f64) {
    let mut mom = head.moments();
    let mut best = (score(&head), head.snapshot());
    let mut stale = 0;
    for epoch in 1..=settings.max_epochs {
        head.step(x, y, settings.l2, settings.lr, &mut mom);
        if epoch % settings.eval_every == 0 || epoch == settings.max_epochs {
            let s = score(&head);
            if s > best.0 {
                best = (s, head.snapshot());
                stale = 0;
            } else {
                stale += 1;
                if stale >= settings.patience {
                    break;
                }
            }
        }
    }
    head.restore(best.1);
    (head, best.0)
}
