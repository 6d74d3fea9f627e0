//! Reverse-mode autodiff over a linear tape.
//!
//! Every op appends one node whose inputs were created earlier, so node ids are
//! already a topological order and `backward` is a single reverse sweep.
//! Activations are laid out time-major (`T×C`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scalar::{gemm, Scalar, View};
use super::tensor::Tensor;
use super::NumericsError;

pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale { x: Var, factor: S },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, w: Var, stride: usize, groups: usize },
    PadTime { x: Var, left: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<S>, rstd: Vec<S> },
    Gelu { x: Var, cdf: Vec<S> },
    Softmax { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<S> },
    Dropout { x: Var, mask: Vec<S> },
    ReplaceRows { x: Var, fill: Var, rows: Vec<usize> },
    SmoothL1 { pred: Var, target: Tensor<S>, rows: Vec<usize>, beta: S },
    Dot { x: Var, weights: Tensor<S> },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::Linear { .. } => "linear",
            Op::Conv1d { .. } => "conv1d",
            Op::PadTime { .. } => "pad_time",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GroupNorm { .. } => "group_norm",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::Attention { .. } => "attention",
            Op::Dropout { .. } => "dropout",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Dot { .. } => "dot",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Tape of primitive applications.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
    training: bool,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output length of a valid (unpadded) strided convolution.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize) -> Result<usize, NumericsError> {
    if stride == 0 || kernel == 0 {
        return Err(NumericsError::Config("kernel and stride must be positive".into()));
    }
    if len < kernel {
        return Err(NumericsError::Length { needed: kernel, got: len });
    }
    Ok((len - kernel) / stride + 1)
}

fn gelu_cdf<S: Scalar>(x: S) -> S {
    S::of(0.5) * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<S: Scalar>(x: S) -> S {
    S::of(0.398_942_280_401_432_7) * (-(x * x) * S::of(0.5)).fast_exp()
}

/// Smooth-L1 (Huber / beta) value of a single residual.
pub fn smooth_l1_value<S: Scalar>(e: S, beta: S) -> S {
    let a = e.abs();
    if a <= beta {
        S::of(0.5) * e * e / beta
    } else {
        a - S::of(0.5) * beta
    }
}

fn smooth_l1_slope<S: Scalar>(e: S, beta: S) -> S {
    if e.abs() <= beta {
        e / beta
    } else {
        e.signum()
    }
}

fn softmax_rows<S: Scalar>(data: &mut [S], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).fast_exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// `xhat·gamma + beta` per row.
fn affine_rows<S: Scalar>(xhat: &[S], gamma: &[S], beta: &[S]) -> Vec<S> {
    let mut y = Vec::with_capacity(xhat.len());
    for row in xhat.chunks(gamma.len()) {
        y.extend(row.iter().zip(gamma).zip(beta).map(|((&h, &g), &b)| h * g + b));
    }
    y
}

/// Reorders conv weights `C_out×C_in×k` to `C_out×(k·C_in)` with index `j·C_in + ci`.
fn window_major<S: Scalar>(w: &[S], cout: usize, cin: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); w.len()];
    for o in 0..cout {
        for ci in 0..cin {
            for j in 0..k {
                out[o * k * cin + j * cin + ci] = w[(o * cin + ci) * k + j];
            }
        }
    }
    out
}

/// Assignment of the elements of a row-major `rows×cols` matrix to
/// equally sized normalization groups.
#[derive(Clone, Copy)]
enum Grouping {
    /// One group per row (layer norm).
    Rows,
    /// Contiguous channel blocks of this width, pooled over all rows.
    Channels(usize),
}

/// Per-column sums of `(x − center)²`, or of `x` when `center` is `None`.
fn column_sums<S: Scalar>(x: &[S], cols: usize, center: Option<&[S]>) -> Vec<S> {
    let mut acc = vec![S::zero(); cols];
    for row in x.chunks(cols) {
        match center {
            None => acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v),
            Some(m) => acc.iter_mut().zip(row).zip(m).for_each(|((a, &v), &m)| *a += (v - m) * (v - m)),
        }
    }
    acc
}

/// Sums blocks of `w` adjacent columns and repeats each result `w` times.
fn pool_columns<S: Scalar>(per_col: &[S], w: usize, scale: S) -> Vec<S> {
    let mut out = Vec::with_capacity(per_col.len());
    for block in per_col.chunks(w) {
        let v = block.iter().fold(S::zero(), |a, &b| a + b) * scale;
        out.extend(std::iter::repeat(v).take(w));
    }
    out
}

/// Normalizes `x: rows×cols` per group; returns `(xhat, rstd per group)`.
fn normalize_groups<S: Scalar>(x: &[S], cols: usize, grouping: Grouping) -> (Vec<S>, Vec<S>) {
    let eps = S::of(NORM_EPS);
    let mut xhat = Vec::with_capacity(x.len());
    match grouping {
        Grouping::Rows => {
            let n = S::of(cols as f64);
            let mut rstd = Vec::with_capacity(x.len() / cols);
            for row in x.chunks(cols) {
                let mean = row.iter().fold(S::zero(), |a, &v| a + v) / n;
                let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
                let r = S::one() / (var + eps).sqrt();
                xhat.extend(row.iter().map(|&v| (v - mean) * r));
                rstd.push(r);
            }
            (xhat, rstd)
        }
        Grouping::Channels(w) => {
            let inv_n = S::one() / S::of((x.len() / cols * w) as f64);
            let mean = pool_columns(&column_sums(x, cols, None), w, inv_n);
            let var = pool_columns(&column_sums(x, cols, Some(&mean)), w, inv_n);
            let rstd_col: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
            for row in x.chunks(cols) {
                xhat.extend(row.iter().zip(&mean).zip(&rstd_col).map(|((&v, &m), &r)| (v - m) * r));
            }
            (xhat, rstd_col.iter().step_by(w).copied().collect())
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true, training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    /// A graph that records values only; `param` leaves never require grad.
    pub fn inference() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    /// Enables train-mode ops (dropout) with a seeded stream.
    pub fn with_training(mut self, seed: u64) -> Self {
        self.training = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(op.name()));
        }
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite("leaf"));
        }
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: needs_grad && self.grad_enabled });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Result<Var, NumericsError> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var, NumericsError> {
        self.leaf(value, false)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize), NumericsError> {
        self.nodes[v.0]
            .value
            .dims2()
            .map_err(|e| NumericsError::Shape(format!("{op}: {e}")))
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Broadcast-add a length-`C` vector to every row of a `T×C` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (_, c) = self.dims2(x, "add_row")?;
        if self.shape(bias) != [c] {
            return Err(NumericsError::Shape(format!("add_row: bias {:?} for {c} columns", self.shape(bias))));
        }
        let b = self.data(bias);
        let data = self.data(x).chunks(c).flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w)).collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::AddRow { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var, NumericsError> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// `y = x·wᵀ + b` with `x: T×I`, `w: O×I`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let (t, i) = self.dims2(x, "linear")?;
        let (o, wi) = self.dims2(w, "linear")?;
        if wi != i {
            return Err(NumericsError::Shape(format!("linear: input width {i}, weight {o}x{wi}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(NumericsError::Shape(format!("linear: bias {:?}, expected [{o}]", self.shape(b))));
            }
        }
        let mut y = vec![S::zero(); t * o];
        gemm(t, i, o, self.data(x), View::rows(i), self.data(w), View::transposed(i), &mut y, View::rows(o), false);
        if let Some(b) = b {
            let bias = self.data(b);
            for row in y.chunks_mut(o) {
                for (v, &bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(&[t, o], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    /// Valid (unpadded) grouped 1-D convolution.
    ///
    /// `x: T×C_in`, `w: C_out×(C_in/groups)×k`; output `T_out×C_out` with
    /// `T_out = ⌊(T − k)/stride⌋ + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, groups: usize) -> Result<Var, NumericsError> {
        let (t, cin) = self.dims2(x, "conv1d")?;
        let (cout, cg, k) = match self.shape(w) {
            &[a, b, c] => (a, b, c),
            s => return Err(NumericsError::Shape(format!("conv1d: weight must be rank 3, got {s:?}"))),
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cg {
            return Err(NumericsError::Config(format!(
                "conv1d: {cin} input / {cout} output channels incompatible with {groups} groups and weight {cout}x{cg}x{k}"
            )));
        }
        let to = conv_output_len(t, k, stride)?;
        let og = cout / groups;
        let mut y = vec![S::zero(); to * cout];
        let (xd, wd) = (self.data(x), self.data(w));
        if groups == 1 {
            // Row-major input windows are contiguous runs of k·C_in values,
            // so the whole convolution is one GEMM over overlapping rows.
            let kc = k * cin;
            let wt = window_major(wd, cout, cin, k);
            gemm(to, kc, cout, xd, View { offset: 0, row_stride: stride * cin, col_stride: 1 }, &wt, View::transposed(kc), &mut y, View::rows(cout), false);
            let value = Tensor::new(&[to, cout], y)?;
            return self.push(value, Op::Conv1d { x, w, stride, groups }, &[x, w]);
        }
        for g in 0..groups {
            for j in 0..k {
                gemm(
                    to,
                    cg,
                    og,
                    xd,
                    View { offset: j * cin + g * cg, row_stride: stride * cin, col_stride: 1 },
                    wd,
                    View { offset: g * og * cg * k + j, row_stride: k, col_stride: cg * k },
                    &mut y,
                    View { offset: g * og, row_stride: cout, col_stride: 1 },
                    j > 0,
                );
            }
        }
        let value = Tensor::new(&[to, cout], y)?;
        self.push(value, Op::Conv1d { x, w, stride, groups }, &[x, w])
    }

    /// Zero-pads the time axis.
    pub fn pad_time(&mut self, x: Var, left: usize, right: usize) -> Result<Var, NumericsError> {
        let (t, c) = self.dims2(x, "pad_time")?;
        let mut y = vec![S::zero(); (t + left + right) * c];
        y[left * c..(left + t) * c].copy_from_slice(self.data(x));
        let value = Tensor::new(&[t + left + right, c], y)?;
        self.push(value, Op::PadTime { x, left }, &[x])
    }

    /// Layer norm over the feature (last) axis, eps 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (t, d) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NumericsError::Shape("layer_norm: affine params must match feature dim".into()));
        }
        let (xhat, rstd) = normalize_groups(self.data(x), d, Grouping::Rows);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let y = affine_rows(&xhat, gd, bd);
        let value = Tensor::new(&[t, d], y)?;
        let keep = self.grad_enabled;
        let (xhat, rstd) = if keep { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Group norm over `(time, channels-in-group)`, per-channel affine, eps 1e-5.
    /// With `groups == C` each channel is normalized over time.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var, NumericsError> {
        let (t, c) = self.dims2(x, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(NumericsError::Config(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NumericsError::Shape("group_norm: affine params must match channels".into()));
        }
        let cg = c / groups;
        let (xhat, rstd) = normalize_groups(self.data(x), c, Grouping::Channels(cg));
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let y = affine_rows(&xhat, gd, bd);
        let value = Tensor::new(&[t, c], y)?;
        let keep = self.grad_enabled;
        let (xhat, rstd) = if keep { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(value, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, &[x, gamma, beta])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let cdf: Vec<S> = self.data(x).iter().map(|&v| gelu_cdf(v)).collect();
        let y = self.data(x).iter().zip(&cdf).map(|(&v, &p)| v * p).collect();
        let value = Tensor::new(self.shape(x), y)?;
        let cdf = if self.want(x) { cdf } else { Vec::new() };
        self.push(value, Op::Gelu { x, cdf }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let cols = *self.shape(x).last().unwrap_or(&1);
        let mut y = self.data(x).to_vec();
        softmax_rows(&mut y, cols);
        let value = Tensor::new(self.shape(x), y)?;
        self.push(value, Op::Softmax { x }, &[x])
    }

    /// Multi-head scaled dot-product self-attention over `T×D` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NumericsError> {
        let (t, d) = self.dims2(q, "attention")?;
        if self.shape(k) != [t, d] || self.shape(v) != [t, d] {
            return Err(NumericsError::Shape("attention: q, k, v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Config(format!("attention: dim {d} not divisible by {heads} heads")));
        }
        if t == 0 {
            return Err(NumericsError::Length { needed: 1, got: 0 });
        }
        let hd = d / heads;
        let scale = S::one() / S::of(hd as f64).sqrt();
        let mut y = vec![S::zero(); t * d];
        let keep = self.want(q) || self.want(k) || self.want(v);
        let mut probs = if keep { Vec::with_capacity(heads * t * t) } else { Vec::new() };
        let mut p = vec![S::zero(); t * t];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        for h in 0..heads {
            let head = View { offset: h * hd, row_stride: d, col_stride: 1 };
            let head_t = View { offset: h * hd, row_stride: 1, col_stride: d };
            gemm(t, hd, t, qd, head, kd, head_t, &mut p, View::rows(t), false);
            for v in p.iter_mut() {
                *v *= scale;
            }
            softmax_rows(&mut p, t);
            gemm(t, t, hd, &p, View::rows(t), vd, head, &mut y, head, false);
            if keep {
                probs.extend_from_slice(&p);
            }
        }
        let value = Tensor::new(&[t, d], y)?;
        self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = S::of(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<S> = (0..n).map(|_| if self.rng.gen::<f64>() < p { S::zero() } else { keep }).collect();
        let y = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(self.shape(x), y)?;
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// Replaces the listed rows of `x: T×D` with the vector `fill: D`.
    pub fn replace_rows(&mut self, x: Var, rows: &[usize], fill: Var) -> Result<Var, NumericsError> {
        let (t, d) = self.dims2(x, "replace_rows")?;
        if self.shape(fill) != [d] {
            return Err(NumericsError::Shape(format!("replace_rows: fill {:?} for width {d}", self.shape(fill))));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= t) {
            return Err(NumericsError::Index { index: r, len: t });
        }
        let mut y = self.data(x).to_vec();
        let f = self.data(fill).to_vec();
        for &r in rows {
            y[r * d..(r + 1) * d].copy_from_slice(&f);
        }
        let value = Tensor::new(&[t, d], y)?;
        self.push(value, Op::ReplaceRows { x, fill, rows: rows.to_vec() }, &[x, fill])
    }

    /// Mean smooth-L1 between `pred` and a constant `target`, over the listed
    /// rows (all rows when `rows` is `None`) and every column.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<S>, rows: Option<&[usize]>, beta: S) -> Result<Var, NumericsError> {
        if !(beta > S::zero()) {
            return Err(NumericsError::Config("smooth_l1: beta must be positive".into()));
        }
        if self.shape(pred) != target.shape() {
            return Err(NumericsError::Shape(format!(
                "smooth_l1: prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        let (t, d) = self.dims2(pred, "smooth_l1")?;
        let rows: Vec<usize> = rows.map_or_else(|| (0..t).collect(), <[usize]>::to_vec);
        if rows.is_empty() {
            return Err(NumericsError::Config("smooth_l1: no rows selected".into()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= t) {
            return Err(NumericsError::Index { index: r, len: t });
        }
        let (pd, td) = (self.data(pred), target.data());
        let mut total = S::zero();
        for &r in &rows {
            for j in r * d..(r + 1) * d {
                total += smooth_l1_value(pd[j] - td[j], beta);
            }
        }
        let loss = total / S::of((rows.len() * d) as f64);
        let value = Tensor::new(&[1], vec![loss])?;
        self.push(value, Op::SmoothL1 { pred, target: target.clone(), rows, beta }, &[pred])
    }

    /// `Σ x ⊙ weights` as a scalar; used to reduce arbitrary outputs in checks.
    pub fn dot(&mut self, x: Var, weights: &Tensor<S>) -> Result<Var, NumericsError> {
        if self.shape(x) != weights.shape() {
            return Err(NumericsError::Shape("dot: shape mismatch".into()));
        }
        let s = self.data(x).iter().zip(weights.data()).fold(S::zero(), |a, (&x, &w)| a + x * w);
        let value = Tensor::new(&[1], vec![s])?;
        self.push(value, Op::Dot { x, weights: weights.clone() }, &[x])
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, NumericsError> {
        self.backward_seeded(loss, S::one())
    }

    /// Reverse sweep from a scalar node with upstream gradient `seed`.
    pub fn backward_seeded(&self, loss: Var, seed: S) -> Result<Gradients<S>, NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::Shape(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.want(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![seed])?);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, g.data(), &mut grads)?;
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(NumericsError::NonFinite("backward"));
            }
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Tensor<S>>], v: Var) -> &'a mut [S] {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v))).data_mut()
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Tensor<S>>]) -> Result<(), NumericsError> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.want(v) {
                        for (d, &gv) in self.grad_buf(grads, v).iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if self.want(*x) {
                    for (d, &gv) in self.grad_buf(grads, *x).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.want(*bias) {
                    let c = self.shape(*bias)[0];
                    let db = self.grad_buf(grads, *bias);
                    for row in g.chunks(c) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.want(*x) {
                    for (d, &gv) in self.grad_buf(grads, *x).iter_mut().zip(g) {
                        *d += gv * *factor;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (t, i) = self.dims2(*x, "linear")?;
                let o = self.shape(*w)[0];
                if self.want(*x) {
                    let dx = self.grad_buf(grads, *x);
                    gemm(t, o, i, g, View::rows(o), self.data(*w), View::rows(i), dx, View::rows(i), true);
                }
                if self.want(*w) {
                    let dw = self.grad_buf(grads, *w);
                    gemm(o, t, i, g, View::transposed(o), self.data(*x), View::rows(i), dw, View::rows(i), true);
                }
                if let Some(b) = b {
                    if self.want(*b) {
                        let db = self.grad_buf(grads, *b);
                        for row in g.chunks(o) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::Conv1d { x, w, stride, groups } => {
                let (_, cin) = self.dims2(*x, "conv1d")?;
                let (cout, cg, k) = match self.shape(*w) {
                    &[a, b, c] => (a, b, c),
                    _ => unreachable!("validated in forward"),
                };
                let to = node.value.shape()[0];
                let og = cout / groups;
                let s = *stride;
                if *groups == 1 {
                    let kc = k * cin;
                    let windows = View { offset: 0, row_stride: s * cin, col_stride: 1 };
                    if self.want(*w) {
                        let mut dwt = vec![S::zero(); cout * kc];
                        gemm(cout, to, kc, g, View::transposed(cout), self.data(*x), windows, &mut dwt, View::rows(kc), false);
                        let dw = self.grad_buf(grads, *w);
                        for o in 0..cout {
                            for j in 0..k {
                                for ci in 0..cin {
                                    dw[(o * cin + ci) * k + j] += dwt[o * kc + j * cin + ci];
                                }
                            }
                        }
                    }
                    if self.want(*x) {
                        let wt = window_major(self.data(*w), cout, cin, k);
                        let mut dwin = vec![S::zero(); to * kc];
                        gemm(to, cout, kc, g, View::rows(cout), &wt, View::rows(kc), &mut dwin, View::rows(kc), false);
                        let dx = self.grad_buf(grads, *x);
                        for (t, row) in dwin.chunks(kc).enumerate() {
                            for (d, &v) in dx[t * s * cin..t * s * cin + kc].iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    return Ok(());
                }
                for gi in 0..*groups {
                    for j in 0..k {
                        let x_view = View { offset: j * cin + gi * cg, row_stride: s * cin, col_stride: 1 };
                        let g_view = View { offset: gi * og, row_stride: cout, col_stride: 1 };
                        if self.want(*x) {
                            let w_view = View { offset: gi * og * cg * k + j, row_stride: cg * k, col_stride: k };
                            let dx = self.grad_buf(grads, *x);
                            gemm(to, og, cg, g, g_view, self.data(*w), w_view, dx, x_view, true);
                        }
                        if self.want(*w) {
                            let gt_view = View { offset: gi * og, row_stride: 1, col_stride: cout };
                            let dw_view = View { offset: gi * og * cg * k + j, row_stride: cg * k, col_stride: k };
                            let dw = self.grad_buf(grads, *w);
                            gemm(og, to, cg, g, gt_view, self.data(*x), x_view, dw, dw_view, true);
                        }
                    }
                }
            }
            Op::PadTime { x, left } => {
                if self.want(*x) {
                    let (t, c) = self.dims2(*x, "pad_time")?;
                    let src = &g[left * c..(left + t) * c];
                    for (d, &gv) in self.grad_buf(grads, *x).iter_mut().zip(src) {
                        *d += gv;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (_, d) = self.dims2(*x, "layer_norm")?;
                self.norm_backward(g, grads, (*x, *gamma, *beta), xhat, rstd, d, Grouping::Rows);
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let (_, c) = self.dims2(*x, "group_norm")?;
                self.norm_backward(g, grads, (*x, *gamma, *beta), xhat, rstd, c, Grouping::Channels(c / groups));
            }
            Op::Gelu { x, cdf } => {
                if self.want(*x) {
                    let xd = self.data(*x);
                    let dx = self.grad_buf(grads, *x);
                    for (((d, &gv), &xv), &p) in dx.iter_mut().zip(g).zip(xd).zip(cdf) {
                        *d += gv * (p + xv * gelu_pdf(xv));
                    }
                }
            }
            Op::Softmax { x } => {
                if self.want(*x) {
                    let cols = *self.shape(*x).last().unwrap_or(&1);
                    let y = node.value.data();
                    let dx = self.grad_buf(grads, *x);
                    for ((drow, grow), yrow) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dotp = grow.iter().zip(yrow).fold(S::zero(), |a, (&gv, &yv)| a + gv * yv);
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dotp);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (t, d) = self.dims2(*q, "attention")?;
                let hd = d / heads;
                let scale = S::one() / S::of(hd as f64).sqrt();
                let mut dp = vec![S::zero(); t * t];
                for h in 0..*heads {
                    let head = View { offset: h * hd, row_stride: d, col_stride: 1 };
                    let head_t = View { offset: h * hd, row_stride: 1, col_stride: d };
                    let p = &probs[h * t * t..(h + 1) * t * t];
                    if self.want(*v) {
                        let dv = self.grad_buf(grads, *v);
                        gemm(t, t, hd, p, View::transposed(t), g, head, dv, head, true);
                    }
                    if !(self.want(*q) || self.want(*k)) {
                        continue;
                    }
                    gemm(t, hd, t, g, head, self.data(*v), head_t, &mut dp, View::rows(t), false);
                    for (drow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                        let dotp = drow.iter().zip(prow).fold(S::zero(), |a, (&x, &y)| a + x * y);
                        for (dv, &pv) in drow.iter_mut().zip(prow) {
                            *dv = pv * (*dv - dotp) * scale;
                        }
                    }
                    if self.want(*q) {
                        let dq = self.grad_buf(grads, *q);
                        gemm(t, t, hd, &dp, View::rows(t), self.data(*k), head, dq, head, true);
                    }
                    if self.want(*k) {
                        let dk = self.grad_buf(grads, *k);
                        gemm(t, t, hd, &dp, View::transposed(t), self.data(*q), head, dk, head, true);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.want(*x) {
                    for ((d, &gv), &m) in self.grad_buf(grads, *x).iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::ReplaceRows { x, fill, rows } => {
                let d = self.shape(*fill)[0];
                if self.want(*x) {
                    let dx = self.grad_buf(grads, *x);
                    let mut masked = vec![false; g.len() / d];
                    for &r in rows {
                        masked[r] = true;
                    }
                    for (r, (drow, grow)) in dx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        if !masked[r] {
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += gv;
                            }
                        }
                    }
                }
                if self.want(*fill) {
                    let mut seen = vec![false; g.len() / d];
                    let df = self.grad_buf(grads, *fill);
                    for &r in rows {
                        if std::mem::replace(&mut seen[r], true) {
                            continue;
                        }
                        for (dv, &gv) in df.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, target, rows, beta } => {
                if self.want(*pred) {
                    let d = target.shape()[1];
                    let scale = g[0] / S::of((rows.len() * d) as f64);
                    let pd = self.data(*pred);
                    let td = target.data();
                    let dp = self.grad_buf(grads, *pred);
                    for &r in rows {
                        for j in r * d..(r + 1) * d {
                            dp[j] += scale * smooth_l1_slope(pd[j] - td[j], *beta);
                        }
                    }
                }
            }
            Op::Dot { x, weights } => {
                if self.want(*x) {
                    let dx = self.grad_buf(grads, *x);
                    for (d, &w) in dx.iter_mut().zip(weights.data()) {
                        *d += g[0] * w;
                    }
                }
            }
        }
        Ok(())
    }

    /// Shared backward of layer/group norm. `members(group)` lists the flat
    /// indices normalized together; affine params are per last-axis column.
    #[allow(clippy::too_many_arguments)]
    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        g: &[S],
        grads: &mut [Option<Tensor<S>>],
        (x, gamma, beta): (Var, Var, Var),
        xhat: &[S],
        rstd: &[S],
        cols: usize,
        grouping: Grouping,
    ) {
        if self.want(gamma) {
            let dg = self.grad_buf(grads, gamma);
            for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                for ((d, &gv), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                    *d += gv * h;
                }
            }
        }
        if self.want(beta) {
            let db = self.grad_buf(grads, beta);
            for grow in g.chunks(cols) {
                for (d, &gv) in db.iter_mut().zip(grow) {
                    *d += gv;
                }
            }
        }
        if self.want(x) {
            let gd = self.data(gamma).to_vec();
            let dx = self.grad_buf(grads, x);
            match grouping {
                Grouping::Rows => {
                    let n = S::of(cols as f64);
                    let rows = g.chunks(cols).zip(xhat.chunks(cols)).zip(dx.chunks_mut(cols)).zip(rstd);
                    for (((grow, hrow), drow), &r) in rows {
                        let (mut md, mut mdh) = (S::zero(), S::zero());
                        for ((&gv, &h), &gc) in grow.iter().zip(hrow).zip(&gd) {
                            md += gv * gc;
                            mdh += gv * gc * h;
                        }
                        let (md, mdh) = (md / n, mdh / n);
                        for (((d, &gv), &h), &gc) in drow.iter_mut().zip(grow).zip(hrow).zip(&gd) {
                            *d += r * (gv * gc - md - h * mdh);
                        }
                    }
                }
                Grouping::Channels(w) => {
                    let inv_n = S::one() / S::of((g.len() / cols * w) as f64);
                    let mut sum_d = vec![S::zero(); cols];
                    let mut sum_dh = vec![S::zero(); cols];
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((((sd, sdh), &gv), &h), &gc) in sum_d.iter_mut().zip(&mut sum_dh).zip(grow).zip(hrow).zip(&gd) {
                            *sd += gv * gc;
                            *sdh += gv * gc * h;
                        }
                    }
                    let mean_d = pool_columns(&sum_d, w, inv_n);
                    let mean_dh = pool_columns(&sum_dh, w, inv_n);
                    let r_col: Vec<S> = rstd.iter().flat_map(|&r| std::iter::repeat(r).take(w)).collect();
                    for ((drow, grow), hrow) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(xhat.chunks(cols)) {
                        let cols_iter = drow.iter_mut().zip(grow).zip(hrow).zip(&gd).zip(&r_col).zip(&mean_d).zip(&mean_dh);
                        for ((((((d, &gv), &h), &gc), &r), &md), &mdh) in cols_iter {
                            *d += r * (gv * gc - md - h * mdh);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Tensor::new(&[rows, cols], data).unwrap()
    }

    #[test]
    fn conv_length_formula_boundary() {
        assert_eq!(conv_output_len(10, 10, 5).unwrap(), 1);
        assert!(matches!(conv_output_len(9, 10, 5), Err(NumericsError::Length { .. })));
    }

    #[test]
    fn conv_of_zero_input_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[20, 3])).unwrap();
        let w = g.param(mat(4, 3, |i, j| (i + j) as f64).reshape(&[4, 3, 1]).unwrap()).unwrap();
        let y = g.conv1d(x, w, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[10, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_short_input() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[4, 1])).unwrap();
        let w = g.param(Tensor::zeros(&[2, 1, 5])).unwrap();
        assert!(matches!(g.conv1d(x, w, 1, 1), Err(NumericsError::Length { needed: 5, got: 4 })));
    }

    #[test]
    fn attention_single_step_returns_value_row() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(mat(1, 4, |_, j| j as f64)).unwrap();
        let k = g.constant(mat(1, 4, |_, j| -(j as f64))).unwrap();
        let v = g.constant(mat(1, 4, |_, j| 0.5 * j as f64 + 1.0)).unwrap();
        let y = g.attention(q, k, v, 2).unwrap();
        assert_eq!(g.value(y).data(), g.value(v).data());
    }

    #[test]
    fn attention_with_identical_keys_is_uniform() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(mat(3, 2, |i, j| (i * 2 + j) as f64)).unwrap();
        let k = g.constant(mat(3, 2, |_, j| j as f64 + 0.3)).unwrap();
        let v = g.constant(mat(3, 2, |i, j| (i * 7 + j) as f64)).unwrap();
        let y = g.attention(q, k, v, 1).unwrap();
        for row in g.value(y).data().chunks(2) {
            assert!((row[0] - 7.0).abs() < 1e-12);
            assert!((row[1] - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(mat(2, 6, |_, _| 0.0)).unwrap();
        assert!(matches!(g.attention(q, q, q, 4), Err(NumericsError::Config(_))));
    }

    #[test]
    fn smooth_l1_formula_points() {
        assert_eq!(smooth_l1_value(0.0f64, 1.0), 0.0);
        assert_eq!(smooth_l1_value(2.0f64, 1.0), 1.5);
        assert_eq!(smooth_l1_value(0.5f64, 1.0), 0.125);
        assert_eq!(smooth_l1_value(-2.0f64, 1.0), 1.5);
    }

    #[test]
    fn smooth_l1_shape_mismatch_is_error() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::zeros(&[2, 3])).unwrap();
        assert!(g.smooth_l1(p, &Tensor::zeros(&[3, 2]), None, 1.0).is_err());
        assert!(g.smooth_l1(p, &Tensor::zeros(&[2, 3]), None, 0.0).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f32>::new();
        assert!(g.constant(Tensor::full(&[2], f32::NAN)).is_err());
        let x = g.constant(Tensor::full(&[1, 2], 3.0e38)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(NumericsError::NonFinite("scale"))));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[4, 4], 1.0)).unwrap();
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
        let run = || {
            let mut g = Graph::<f32>::new().with_training(7);
            let x = g.constant(Tensor::full(&[8, 8], 1.0)).unwrap();
            let y = g.dropout(x, 0.5).unwrap();
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn replace_rows_keeps_other_rows_and_routes_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.param(mat(3, 2, |i, j| (i * 2 + j) as f64)).unwrap();
        let fill = g.param(Tensor::new(&[2], vec![9.0, 8.0]).unwrap()).unwrap();
        let y = g.replace_rows(x, &[0], fill).unwrap();
        assert_eq!(g.value(y).data(), &[9.0, 8.0, 2.0, 3.0, 4.0, 5.0]);
        let loss = g.dot(y, &mat(3, 2, |_, _| 1.0)).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(grads.get(fill).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn teacher_style_graph_records_no_gradients() {
        let mut g = Graph::<f32>::inference();
        let w = g.param(Tensor::full(&[2, 2], 0.5)).unwrap();
        let x = g.constant(Tensor::full(&[3, 2], 1.0)).unwrap();
        let y = g.linear(x, w, None).unwrap();
        assert!(!g.requires_grad(y));
        let loss = g.dot(y, &Tensor::full(&[3, 2], 1.0)).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
    }
}
