//! Convolutional waveform feature extractor followed by a pre-norm
//! transformer. Student and teacher are two parameter sets of the same
//! [`EncoderConfig`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::{MaskError, MaskSet};
use crate::numerics::{conv_output_len, Graph, NumericsError, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("input of {got} samples is shorter than the receptive field of {needed}")]
    Length { needed: usize, got: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Where each transformer layer's output is read for targets and probing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOutputPoint {
    /// Residual stream after the block's feed-forward sublayer.
    #[default]
    Residual,
    /// The residual stream passed through the shared final layer norm.
    FinalNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub conv: Vec<ConvLayerSpec>,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    pub dropout: f64,
    pub sample_rate: u32,
    pub layer_output: LayerOutputPoint,
}

const KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];
const STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];

fn conv_stack(channels: usize) -> Vec<ConvLayerSpec> {
    KERNELS.iter().zip(STRIDES).map(|(&kernel, stride)| ConvLayerSpec { channels, kernel, stride }).collect()
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// H=64, N=2, 4 heads, 64 conv channels.
    pub fn desk() -> Self {
        EncoderConfig {
            conv: conv_stack(64),
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            pos_conv_kernel: 9,
            pos_conv_groups: 2,
            dropout: 0.0,
            sample_rate: 16_000,
            layer_output: LayerOutputPoint::Residual,
        }
    }

    /// H=768, N=12, 12 heads, 512 conv channels.
    pub fn full_scale() -> Self {
        EncoderConfig {
            conv: conv_stack(512),
            hidden: 768,
            layers: 12,
            heads: 12,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            dropout: 0.1,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.conv.is_empty() {
            return bad("conv stack is empty".into());
        }
        if self.conv.iter().any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0) {
            return bad("conv channels, kernels and strides must be positive".into());
        }
        let hop: usize = self.hop();
        if hop * 50 != self.sample_rate as usize {
            return bad(format!("stride product {hop} × 50 ≠ sample rate {}", self.sample_rate));
        }
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("hidden, layers, heads and ffn_mult must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.pos_conv_kernel == 0 || self.pos_conv_groups == 0 || self.hidden % self.pos_conv_groups != 0 {
            return bad(format!(
                "positional conv kernel {} / groups {} invalid for hidden {}",
                self.pos_conv_kernel, self.pos_conv_groups, self.hidden
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Total downsampling factor of the conv stack.
    pub fn hop(&self) -> usize {
        self.conv.iter().map(|c| c.stride).product()
    }

    pub fn conv_channels(&self) -> usize {
        self.conv.last().map_or(0, |c| c.channels)
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.hidden
    }

    /// Minimum input length producing one frame.
    pub fn receptive_field(&self) -> usize {
        self.conv.iter().rev().fold(1, |r, c| (r - 1) * c.stride + c.kernel)
    }

    /// Exact frame count for `samples` input samples.
    pub fn output_length(&self, samples: usize) -> Result<usize, EncoderError> {
        let rf = self.receptive_field();
        if samples < rf {
            return Err(EncoderError::Length { needed: rf, got: samples });
        }
        let mut t = samples;
        for c in &self.conv {
            t = conv_output_len(t, c.kernel, c.stride)?;
        }
        Ok(t)
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f, c) = (self.hidden, self.ffn_dim(), self.conv_channels());
        let mut out = Vec::new();
        let mut cin = 1;
        for (i, l) in self.conv.iter().enumerate() {
            out.push((format!("conv.{i}.weight"), vec![l.channels, cin, l.kernel]));
            if i == 0 {
                out.push(("conv.0.norm.weight".into(), vec![l.channels]));
                out.push(("conv.0.norm.bias".into(), vec![l.channels]));
            }
            cin = l.channels;
        }
        out.push(("feature_norm.weight".into(), vec![c]));
        out.push(("feature_norm.bias".into(), vec![c]));
        out.push(("proj.weight".into(), vec![h, c]));
        out.push(("proj.bias".into(), vec![h]));
        out.push(("mask_emb".into(), vec![h]));
        out.push(("pos_conv.weight".into(), vec![h, h / self.pos_conv_groups, self.pos_conv_kernel]));
        out.push(("pos_conv.bias".into(), vec![h]));
        for l in 0..self.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("ln1.weight"), vec![h]));
            out.push((p("ln1.bias"), vec![h]));
            // No key bias: it shifts every score in a softmax row equally.
            for m in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.{m}.weight")), vec![h, h]));
                if m != "k" {
                    out.push((p(&format!("attn.{m}.bias")), vec![h]));
                }
            }
            out.push((p("ln2.weight"), vec![h]));
            out.push((p("ln2.bias"), vec![h]));
            out.push((p("ffn.fc1.weight"), vec![f, h]));
            out.push((p("ffn.fc1.bias"), vec![f]));
            out.push((p("ffn.fc2.weight"), vec![h, f]));
            out.push((p("ffn.fc2.bias"), vec![h]));
        }
        out.push(("final_norm.weight".into(), vec![h]));
        out.push(("final_norm.bias".into(), vec![h]));
        out.push(("head.weight".into(), vec![h, h]));
        out.push(("head.bias".into(), vec![h]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Freshly initialized parameters.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore<f32>, EncoderError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let normal = |std: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
                let d = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| d.sample(rng) as f32).collect()
            };
            let data = if name.ends_with("norm.weight") || name.ends_with("ln1.weight") || name.ends_with("ln2.weight") {
                vec![1.0; n]
            } else if name == "mask_emb" {
                (0..n).map(|_| rng.gen::<f32>()).collect()
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name.starts_with("conv.") {
                let fan_in = shape[1] * shape[2];
                normal((2.0 / fan_in as f64).sqrt(), &mut rng)
            } else if name == "pos_conv.weight" {
                normal((4.0 / (self.pos_conv_kernel * self.hidden) as f64).sqrt(), &mut rng)
            } else if name.ends_with(".weight") {
                normal((1.0 / shape[1] as f64).sqrt(), &mut rng)
            } else {
                vec![0.0; n]
            };
            store.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(store)
    }

    /// Checks that a parameter store has exactly this config's layout.
    pub fn check_params<S: Scalar>(&self, params: &ParamStore<S>) -> Result<(), EncoderError> {
        let shapes = self.param_shapes();
        if params.len() != shapes.len() {
            return Err(EncoderError::Config(format!("expected {} tensors, found {}", shapes.len(), params.len())));
        }
        for (name, shape) in shapes {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(EncoderError::Config(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Graph handles produced by one forward pass.
pub struct EncoderGraph {
    /// Conv-extractor output, `T×C`.
    pub conv_out: Var,
    /// One `T×H` output per transformer layer.
    pub layers: Vec<Var>,
    /// Regression-head output on the final layer, `T×H`.
    pub prediction: Var,
    /// Parameter leaves in the store's order.
    pub params: Vec<(String, Var)>,
}

/// Builds the forward pass onto `g`. Masked frames (if any) are replaced by
/// the mask embedding after feature projection.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &EncoderConfig,
    params: &ParamStore<S>,
    samples: &[S],
    mask: Option<&MaskSet>,
) -> Result<EncoderGraph, EncoderError> {
    cfg.check_params(params)?;
    let mut leaves = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        leaves.push((name.to_string(), g.param(t.clone())?));
    }
    forward_with(g, cfg, leaves, samples, mask)
}

/// Like [`forward`] but with parameter leaves already on the graph.
pub fn forward_with<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &EncoderConfig,
    leaves: Vec<(String, Var)>,
    samples: &[S],
    mask: Option<&MaskSet>,
) -> Result<EncoderGraph, EncoderError> {
    cfg.validate()?;
    let t_out = cfg.output_length(samples.len())?;
    let p = |name: &str| -> Result<Var, EncoderError> {
        leaves
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| EncoderError::Numerics(NumericsError::UnknownParam(name.to_string())))
    };

    let mut x = g.constant(Tensor::new(&[samples.len(), 1], samples.to_vec())?)?;
    for (i, c) in cfg.conv.iter().enumerate() {
        x = g.conv1d(x, p(&format!("conv.{i}.weight"))?, c.stride, 1)?;
        if i == 0 {
            x = g.group_norm(x, p("conv.0.norm.weight")?, p("conv.0.norm.bias")?, c.channels)?;
        }
        x = g.gelu(x)?;
    }
    let conv_out = x;
    debug_assert_eq!(g.value(conv_out).shape()[0], t_out);

    let x = g.layer_norm(conv_out, p("feature_norm.weight")?, p("feature_norm.bias")?)?;
    let mut x = g.linear(x, p("proj.weight")?, Some(p("proj.bias")?))?;
    if let Some(m) = mask {
        if let Some(&index) = m.indices().last().filter(|&&i| i >= t_out) {
            return Err(MaskError::Index { index, len: t_out }.into());
        }
        if !m.is_empty() {
            x = g.replace_rows(x, m.indices(), p("mask_emb")?)?;
        }
    }
    let k = cfg.pos_conv_kernel;
    let left = (k - 1) / 2;
    let padded = g.pad_time(x, left, k - 1 - left)?;
    let pos = g.conv1d(padded, p("pos_conv.weight")?, 1, cfg.pos_conv_groups)?;
    let pos = g.add_row(pos, p("pos_conv.bias")?)?;
    let pos = g.gelu(pos)?;
    let mut x = g.add(x, pos)?;

    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let q = |s: &str| p(&format!("layers.{l}.{s}"));
        let h = g.layer_norm(x, q("ln1.weight")?, q("ln1.bias")?)?;
        let qs = g.linear(h, q("attn.q.weight")?, Some(q("attn.q.bias")?))?;
        let ks = g.linear(h, q("attn.k.weight")?, None)?;
        let vs = g.linear(h, q("attn.v.weight")?, Some(q("attn.v.bias")?))?;
        let a = g.attention(qs, ks, vs, cfg.heads)?;
        let a = g.linear(a, q("attn.o.weight")?, Some(q("attn.o.bias")?))?;
        let a = g.dropout(a, cfg.dropout)?;
        x = g.add(x, a)?;
        let h = g.layer_norm(x, q("ln2.weight")?, q("ln2.bias")?)?;
        let h = g.linear(h, q("ffn.fc1.weight")?, Some(q("ffn.fc1.bias")?))?;
        let h = g.gelu(h)?;
        let h = g.linear(h, q("ffn.fc2.weight")?, Some(q("ffn.fc2.bias")?))?;
        let h = g.dropout(h, cfg.dropout)?;
        x = g.add(x, h)?;
        let out = match cfg.layer_output {
            LayerOutputPoint::Residual => x,
            LayerOutputPoint::FinalNorm => g.layer_norm(x, p("final_norm.weight")?, p("final_norm.bias")?)?,
        };
        layers.push(out);
    }
    let y = g.layer_norm(x, p("final_norm.weight")?, p("final_norm.bias")?)?;
    let prediction = g.linear(y, p("head.weight")?, Some(p("head.bias")?))?;
    Ok(EncoderGraph { conv_out, layers, prediction, params: leaves })
}

/// Conv-extractor output and every transformer layer output of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutputs {
    pub conv: Tensor<f32>,
    pub layers: Vec<Tensor<f32>>,
}

impl LayerOutputs {
    pub fn frames(&self) -> usize {
        self.conv.shape()[0]
    }
}

/// Runs the conv stack alone in inference mode; returns `T×C`.
pub fn extract_features(cfg: &EncoderConfig, params: &ParamStore<f32>, samples: &[f32]) -> Result<Tensor<f32>, EncoderError> {
    cfg.validate()?;
    cfg.output_length(samples.len())?;
    let mut g = Graph::<f32>::inference();
    let mut x = g.constant(Tensor::new(&[samples.len(), 1], samples.to_vec())?)?;
    for (i, c) in cfg.conv.iter().enumerate() {
        let w = g.constant(params.get(&format!("conv.{i}.weight"))?.clone())?;
        x = g.conv1d(x, w, c.stride, 1)?;
        if i == 0 {
            let gamma = g.constant(params.get("conv.0.norm.weight")?.clone())?;
            let beta = g.constant(params.get("conv.0.norm.bias")?.clone())?;
            x = g.group_norm(x, gamma, beta, c.channels)?;
        }
        x = g.gelu(x)?;
    }
    Ok(g.value(x).clone())
}

/// Inference-mode pass (dropout off, no gradients).
pub fn encode(
    cfg: &EncoderConfig,
    params: &ParamStore<f32>,
    samples: &[f32],
    mask: Option<&MaskSet>,
) -> Result<LayerOutputs, EncoderError> {
    let mut g = Graph::<f32>::inference();
    let out = forward(&mut g, cfg, params, samples, mask)?;
    Ok(LayerOutputs {
        conv: g.value(out.conv_out).clone(),
        layers: out.layers.iter().map(|&v| g.value(v).clone()).collect(),
    })
}
