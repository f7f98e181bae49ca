//! Keyword-conditioned audio classifier `f(x; θ, θ_v)`.
//!
//! Layout: two 1-D convolutions (kernel 3, strides 1 and 2, GELU) over the
//! feature frames, sinusoidal positions, two pre-norm transformer blocks
//! whose normalization layers are AdaIN driven by the keyword, an elementwise
//! max over time, and a single-logit linear head.
//!
//! Each example is evaluated on its valid frames only, so padding and batch
//! composition never reach the arithmetic.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::{MelSpectrogram, FRAME_SECONDS, N_MELS};
use crate::numerics::{Graph, NumericsError, Scalar, Tensor, Var};
use crate::params::{uniform, Binding, ParamId, ParamStore};
use crate::text_encoder::{check_same_layout, KeywordNormParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid classifier configuration: {0}")]
    InvalidConfig(String),
    #[error("example {0} has no valid frames")]
    ZeroValidLength(usize),
    #[error("window of {window} frames is longer than the {frames}-frame utterance")]
    WindowLargerThanUtterance { window: usize, frames: usize },
    #[error("invalid scan parameters: {0}")]
    InvalidScan(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_adaptive_blocks: usize,
    pub mlp_expansion: usize,
    pub adain_eps: f64,
    pub freeze_encoder: bool,
    pub n_features: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ClassifierConfig {
    /// Laptop-scale width used by the end-to-end experiments.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_adaptive_blocks: 2,
            mlp_expansion: 4,
            adain_eps: 1e-5,
            freeze_encoder: false,
            n_features: N_MELS,
        }
    }

    /// Width of the smallest Whisper encoder.
    pub fn tiny() -> Self {
        Self {
            d_model: 384,
            n_heads: 6,
            ..Self::desk()
        }
    }

    /// Very small model for gradient checks.
    pub fn toy() -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            n_features: 4,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    /// AdaIN layers per model: two per adaptive block.
    pub fn n_adain(&self) -> usize {
        2 * self.n_adaptive_blocks
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: String| Err(ClassifierError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_adaptive_blocks != 2 {
            return bad(format!("n_adaptive_blocks must be 2, got {}", self.n_adaptive_blocks));
        }
        if self.mlp_expansion == 0 || self.n_features == 0 {
            return bad("mlp_expansion and n_features must be positive".into());
        }
        if !(self.adain_eps >= 0.0 && self.adain_eps.is_finite()) {
            return bad(format!("adain_eps {} must be finite and non-negative", self.adain_eps));
        }
        Ok(())
    }
}

/// `B × T_max × n_features` features with per-example valid lengths. Padded frames are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatchFeatures {
    data: Vec<f32>,
    t_max: usize,
    n_features: usize,
    lengths: Vec<usize>,
}

impl PaddedBatchFeatures {
    pub fn from_examples(examples: &[&MelSpectrogram]) -> Result<Self, ClassifierError> {
        let n_features = examples
            .first()
            .map(|m| m.n_mels())
            .ok_or_else(|| ClassifierError::InvalidConfig("empty batch".into()))?;
        if let Some(m) = examples.iter().find(|m| m.n_mels() != n_features) {
            return Err(NumericsError::ShapeMismatch(format!(
                "feature dims {} and {} in one batch",
                n_features,
                m.n_mels()
            ))
            .into());
        }
        let t_max = examples.iter().map(|m| m.n_frames()).max().unwrap_or(0);
        let mut data = vec![0.0; examples.len() * t_max * n_features];
        for (b, m) in examples.iter().enumerate() {
            let start = b * t_max * n_features;
            data[start..start + m.data().len()].copy_from_slice(m.data());
        }
        Ok(Self {
            data,
            t_max,
            n_features,
            lengths: examples.iter().map(|m| m.n_frames()).collect(),
        })
    }

    /// Builds from raw padded storage; lengths must not exceed `t_max`.
    pub fn from_padded(data: Vec<f32>, t_max: usize, n_features: usize, lengths: Vec<usize>) -> Result<Self, ClassifierError> {
        if data.len() != lengths.len() * t_max * n_features || lengths.iter().any(|&l| l > t_max) {
            return Err(NumericsError::ShapeMismatch("padded batch layout".into()).into());
        }
        Ok(Self {
            data,
            t_max,
            n_features,
            lengths,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Valid frames of example `b` as a `len × n_features` tensor.
    pub fn example<F: Scalar>(&self, b: usize) -> Result<Tensor<F>, ClassifierError> {
        let len = self.lengths[b];
        if len == 0 {
            return Err(ClassifierError::ZeroValidLength(b));
        }
        let start = b * self.t_max * self.n_features;
        let data = self.data[start..start + len * self.n_features]
            .iter()
            .map(|&v| F::from_f64_lossy(v as f64))
            .collect();
        Ok(Tensor::new(vec![len, self.n_features], data)?)
    }
}

/// Converts a feature matrix to a graph-ready tensor.
pub fn features_tensor<F: Scalar>(mel: &MelSpectrogram) -> Result<Tensor<F>, ClassifierError> {
    if mel.n_frames() == 0 {
        return Err(ClassifierError::ZeroValidLength(0));
    }
    let data = mel.data().iter().map(|&v| F::from_f64_lossy(v as f64)).collect();
    Ok(Tensor::new(vec![mel.n_frames(), mel.n_mels()], data)?)
}

/// AdaIN over the first `valid_len` rows of `z` (`T × d`).
///
/// Per channel, mean and biased variance are taken over valid frames;
/// `out = gain · (z − μ) / sqrt(var + eps) + bias`. Rows past `valid_len` are zero.
pub fn adain<F: Scalar>(g: &mut Graph<F>, z: Var, valid_len: usize, gain: Var, bias: Var, eps: F) -> Result<Var, ClassifierError> {
    let (t, d) = g.value(z).dims2()?;
    if valid_len == 0 {
        return Err(ClassifierError::ZeroValidLength(0));
    }
    if valid_len > t || g.value(gain).shape() != [d] || g.value(bias).shape() != [d] {
        return Err(NumericsError::ShapeMismatch(format!(
            "adain on {t}x{d} (valid {valid_len}) with gain {:?}, bias {:?}",
            g.value(gain).shape(),
            g.value(bias).shape()
        ))
        .into());
    }
    let valid = if valid_len < t { g.slice(z, 0, 0, valid_len)? } else { z };
    let out = instance_norm_affine(g, valid, gain, bias, eps)?;
    if valid_len == t {
        return Ok(out);
    }
    let pad = g.constant(Tensor::zeros(&[t - valid_len, d]));
    Ok(g.concat(&[out, pad], 0)?)
}

fn instance_norm_affine<F: Scalar>(g: &mut Graph<F>, z: Var, gain: Var, bias: Var, eps: F) -> Result<Var, NumericsError> {
    let mean = g.mean(z, 0)?;
    let var = g.variance(z, 0)?;
    let var = g.add_scalar(var, eps)?;
    let std = g.sqrt(var)?;
    let centered = g.sub(z, mean)?;
    let normed = g.div(centered, std)?;
    let scaled = g.mul(normed, gain)?;
    g.add(scaled, bias)
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    /// Weights and bias ~ U(±1/√fan_in).
    fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self::with_bound(store, name, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    /// He-uniform weights for layers feeding a GELU; zero bias.
    fn he<F: Scalar>(store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let lin = Self::with_bound(store, name, fan_in, fan_out, (6.0 / fan_in as f64).sqrt(), rng);
        *store.get_mut(lin.bias) = Tensor::zeros(&[fan_out]);
        lin
    }

    fn with_bound<F: Scalar>(store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, bound: f64, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], bound)),
            bias: store.add(format!("{name}.bias"), uniform(rng, &[fan_out], bound)),
        }
    }

    fn apply<F: Scalar>(&self, g: &mut Graph<F>, bound: &Binding, x: Var) -> Result<Var, NumericsError> {
        let y = g.matmul(x, bound.var(self.weight))?;
        g.add(y, bound.var(self.bias))
    }
}

#[derive(Clone, Debug)]
struct AdaptiveBlock {
    qkv_weight: ParamId,
    q_bias: ParamId,
    v_bias: ParamId,
    attn_out: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
}

/// Per-block AdaIN inputs: `(gain, bias)` before attention and before the MLP.
#[derive(Clone, Copy, Debug)]
pub struct BlockNorms {
    pub gain_attn: Var,
    pub bias_attn: Var,
    pub gain_mlp: Var,
    pub bias_mlp: Var,
}

/// The audio classifier with shared parameters `θ`.
#[derive(Debug)]
pub struct AudioClassifier<F> {
    config: ClassifierConfig,
    params: ParamStore<F>,
    conv1: Linear,
    conv2: Linear,
    blocks: Vec<AdaptiveBlock>,
    head: Linear,
    encoder_calls: AtomicUsize,
}

impl<F: Scalar> Clone for AudioClassifier<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            params: self.params.clone(),
            conv1: self.conv1.clone(),
            conv2: self.conv2.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
            encoder_calls: AtomicUsize::new(0),
        }
    }
}

impl<F: Scalar> AudioClassifier<F> {
    pub fn new(config: ClassifierConfig, rng: &mut impl Rng) -> Result<Self, ClassifierError> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::default();
        let conv1 = Linear::he(&mut params, "stem.conv1", 3 * config.n_features, d, rng);
        let conv2 = Linear::he(&mut params, "stem.conv2", 3 * d, d, rng);
        if config.freeze_encoder {
            for id in [conv1.weight, conv1.bias, conv2.weight, conv2.bias] {
                params.set_frozen(id, true);
            }
        }
        let hidden = config.mlp_expansion * d;
        let bound = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.n_adaptive_blocks)
            .map(|i| AdaptiveBlock {
                // keys carry no bias: softmax is invariant to it
                qkv_weight: params.add(format!("block{i}.attn.qkv.weight"), uniform(rng, &[d, 3 * d], bound)),
                q_bias: params.add(format!("block{i}.attn.q.bias"), uniform(rng, &[d], bound)),
                v_bias: params.add(format!("block{i}.attn.v.bias"), uniform(rng, &[d], bound)),
                attn_out: Linear::new(&mut params, &format!("block{i}.attn.out"), d, d, rng),
                mlp_in: Linear::new(&mut params, &format!("block{i}.mlp.fc1"), d, hidden, rng),
                mlp_out: Linear::new(&mut params, &format!("block{i}.mlp.fc2"), hidden, d, rng),
            })
            .collect();
        let head = Linear::new(&mut params, "head", d, 1, rng);
        Ok(Self {
            config,
            params,
            conv1,
            conv2,
            blocks,
            head,
            encoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn with_params(mut self, params: ParamStore<F>) -> Result<Self, NumericsError> {
        check_same_layout(&self.params, &params)?;
        self.params = params;
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> AudioClassifier<G> {
        AudioClassifier {
            config: self.config,
            params: self.params.cast(),
            conv1: self.conv1.clone(),
            conv2: self.conv2.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
            encoder_calls: AtomicUsize::new(0),
        }
    }

    /// Number of audio-encoder (stem) evaluations since construction or the last reset.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    pub fn reset_encoder_calls(&self) {
        self.encoder_calls.store(0, Ordering::Relaxed);
    }

    /// Zeroes the attention and MLP output projections of every block.
    pub fn zero_block_outputs(&mut self) {
        let ids: Vec<ParamId> = self
            .blocks
            .iter()
            .flat_map(|b| [b.attn_out.weight, b.attn_out.bias, b.mlp_out.weight, b.mlp_out.bias])
            .collect();
        for id in ids {
            let shape = self.params.get(id).shape().to_vec();
            *self.params.get_mut(id) = Tensor::zeros(&shape);
        }
    }

    pub fn zero_head(&mut self) {
        for id in [self.head.weight, self.head.bias] {
            let shape = self.params.get(id).shape().to_vec();
            *self.params.get_mut(id) = Tensor::zeros(&shape);
        }
    }

    /// Audio encoder: convolution stem (time ×1/2) plus sinusoidal positions.
    ///
    /// This is the keyword-independent prefix; [`crate::inference`] runs it once per utterance.
    pub fn record_encoder(&self, g: &mut Graph<F>, bound: &Binding, x: Var) -> Result<Var, ClassifierError> {
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        let (t, feat) = g.value(x).dims2()?;
        if feat != self.config.n_features {
            return Err(NumericsError::ShapeMismatch(format!(
                "expected {} feature channels, got {feat}",
                self.config.n_features
            ))
            .into());
        }
        if t == 0 {
            return Err(ClassifierError::ZeroValidLength(0));
        }
        let h = conv3(g, bound, &self.conv1, x, 1)?;
        let h = g.gelu(h)?;
        let h = conv3(g, bound, &self.conv2, h, 2)?;
        let h = g.gelu(h)?;
        let t_out = g.value(h).shape()[0];
        let pe = g.constant(positional_encoding(t_out, self.config.d_model));
        Ok(g.add(h, pe)?)
    }

    /// One keyword-adaptive block on the first `valid_len` rows of `z`.
    pub fn record_block(&self, g: &mut Graph<F>, bound: &Binding, index: usize, z: Var, valid_len: usize, norms: BlockNorms) -> Result<Var, ClassifierError> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| ClassifierError::InvalidConfig(format!("no block {index}")))?;
        let (t, d) = g.value(z).dims2()?;
        if d != self.config.d_model {
            return Err(NumericsError::ShapeMismatch(format!("block input width {d}")).into());
        }
        if valid_len == 0 {
            return Err(ClassifierError::ZeroValidLength(0));
        }
        if valid_len > t {
            return Err(NumericsError::ShapeMismatch(format!("valid length {valid_len} > {t}")).into());
        }
        let eps = F::from_f64_lossy(self.config.adain_eps);
        let zv = if valid_len < t { g.slice(z, 0, 0, valid_len)? } else { z };
        let normed = adain(g, zv, valid_len, norms.gain_attn, norms.bias_attn, eps)?;
        let attn = self.attention(g, bound, block, normed)?;
        let z1 = g.add(zv, attn)?;
        let normed = adain(g, z1, valid_len, norms.gain_mlp, norms.bias_mlp, eps)?;
        let hidden = block.mlp_in.apply(g, bound, normed)?;
        let hidden = g.gelu(hidden)?;
        let mlp = block.mlp_out.apply(g, bound, hidden)?;
        let out = g.add(z1, mlp)?;
        if valid_len == t {
            return Ok(out);
        }
        let pad = g.constant(Tensor::zeros(&[t - valid_len, d]));
        Ok(g.concat(&[out, pad], 0)?)
    }

    fn attention(&self, g: &mut Graph<F>, bound: &Binding, block: &AdaptiveBlock, x: Var) -> Result<Var, NumericsError> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let no_key_bias = g.constant(Tensor::zeros(&[d]));
        let qkv_bias = g.concat(&[bound.var(block.q_bias), no_key_bias, bound.var(block.v_bias)], 0)?;
        let qkv = g.matmul(x, bound.var(block.qkv_weight))?;
        let qkv = g.add(qkv, qkv_bias)?;
        let scale = F::one() / F::from_usize(dh).expect("head dim").sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = g.slice(qkv, 1, h * dh, (h + 1) * dh)?;
            let k = g.slice(qkv, 1, d + h * dh, d + (h + 1) * dh)?;
            let v = g.slice(qkv, 1, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax(scores, 1)?;
            outs.push(g.matmul(weights, v)?);
        }
        let merged = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
        block.attn_out.apply(g, bound, merged)
    }

    /// Adaptive blocks, max-pool over time, linear head. Returns the `[1]` logit.
    pub fn record_head(&self, g: &mut Graph<F>, bound: &Binding, encoded: Var, norms: &[BlockNorms]) -> Result<Var, ClassifierError> {
        if norms.len() != self.blocks.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "{} blocks but {} norm sets",
                self.blocks.len(),
                norms.len()
            ))
            .into());
        }
        let mut z = encoded;
        let t = g.value(z).shape()[0];
        for (i, n) in norms.iter().enumerate() {
            z = self.record_block(g, bound, i, z, t, *n)?;
        }
        let pooled = g.max_pool(z, 0)?;
        let pooled = g.reshape(pooled, &[1, self.config.d_model])?;
        let logit = self.head.apply(g, bound, pooled)?;
        Ok(g.reshape(logit, &[1])?)
    }

    /// Full per-example path from features to probability `P(v | x)`.
    pub fn record_example(&self, g: &mut Graph<F>, bound: &Binding, x: Var, norms: &[BlockNorms]) -> Result<Var, ClassifierError> {
        let encoded = self.record_encoder(g, bound, x)?;
        let logit = self.record_head(g, bound, encoded, norms)?;
        Ok(g.sigmoid(logit)?)
    }

    pub fn validate_norms(&self, norms: &KeywordNormParams<F>) -> Result<(), ClassifierError> {
        let d = self.config.d_model;
        let ok = norms.n_layers() == self.config.n_adain()
            && norms.biases.len() == norms.gains.len()
            && norms.gains.iter().chain(&norms.biases).all(|t| t.shape() == [d]);
        if !ok {
            return Err(NumericsError::ShapeMismatch(format!(
                "keyword parameters do not match {} AdaIN layers of width {d}",
                self.config.n_adain()
            ))
            .into());
        }
        Ok(())
    }

    /// Probability for one utterance given precomputed keyword parameters.
    pub fn forward_one(&self, features: &Tensor<F>, norms: &KeywordNormParams<F>) -> Result<F, ClassifierError> {
        self.validate_norms(norms)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(features.clone());
        let block_norms = bind_norms(&mut g, norms, false);
        let prob = self.record_example(&mut g, &bound, x, &block_norms)?;
        Ok(g.value(prob).data()[0])
    }

    /// One probability per batch element; `norms[b]` conditions example `b`.
    pub fn forward(&self, batch: &PaddedBatchFeatures, norms: &[&KeywordNormParams<F>]) -> Result<Vec<F>, ClassifierError> {
        if norms.len() != batch.batch_size() {
            return Err(NumericsError::ShapeMismatch(format!(
                "{} keyword parameter sets for {} examples",
                norms.len(),
                batch.batch_size()
            ))
            .into());
        }
        (0..batch.batch_size())
            .into_par_iter()
            .map(|b| self.forward_one(&batch.example(b)?, norms[b]))
            .collect()
    }

    /// Sliding-window probability trace over an utterance.
    ///
    /// Windows start every `stride_frames`; a final partial window is kept
    /// when the full windows stop short of the end and it spans at least half
    /// a window.
    pub fn scan(&self, x: &MelSpectrogram, norms: &KeywordNormParams<F>, window_frames: usize, stride_frames: usize) -> Result<Vec<ScanPoint>, ClassifierError> {
        let spans = scan_windows(x.n_frames(), window_frames, stride_frames)?;
        spans
            .into_par_iter()
            .map(|(start, end)| {
                let feats = features_tensor::<F>(&x.window(start, end))?;
                let p = self.forward_one(&feats, norms)?;
                Ok(ScanPoint {
                    t_start_s: start as f64 * FRAME_SECONDS,
                    t_end_s: end as f64 * FRAME_SECONDS,
                    probability: p.to_f64_lossy(),
                })
            })
            .collect()
    }
}

/// Records keyword parameters as graph leaves grouped per block.
pub fn bind_norms<F: Scalar>(g: &mut Graph<F>, norms: &KeywordNormParams<F>, requires_grad: bool) -> Vec<BlockNorms> {
    let mut vars = Vec::with_capacity(norms.gains.len());
    for (gain, bias) in norms.gains.iter().zip(&norms.biases) {
        vars.push((g.leaf(gain.clone(), requires_grad), g.leaf(bias.clone(), requires_grad)));
    }
    group_norms(&vars)
}

/// Pairs consecutive AdaIN layers into blocks: layers `2i` and `2i + 1` belong to block `i`.
pub fn group_norms(layers: &[(Var, Var)]) -> Vec<BlockNorms> {
    layers
        .chunks(2)
        .map(|c| BlockNorms {
            gain_attn: c[0].0,
            bias_attn: c[0].1,
            gain_mlp: c[1].0,
            bias_mlp: c[1].1,
        })
        .collect()
}

/// `(start, end)` frame ranges visited by [`AudioClassifier::scan`].
pub fn scan_windows(n_frames: usize, window: usize, stride: usize) -> Result<Vec<(usize, usize)>, ClassifierError> {
    if window < 8 {
        return Err(ClassifierError::InvalidScan(format!(
            "window of {window} frames; at least 8 (4 encoder frames) required"
        )));
    }
    if stride == 0 {
        return Err(ClassifierError::InvalidScan("stride must be at least 1".into()));
    }
    if window > n_frames {
        return Err(ClassifierError::WindowLargerThanUtterance {
            window,
            frames: n_frames,
        });
    }
    let mut spans = Vec::new();
    let mut start = 0;
    while start + window <= n_frames {
        spans.push((start, start + window));
        start += stride;
    }
    let last_end = spans.last().map_or(0, |s| s.1);
    if last_end < n_frames && start < n_frames && 2 * (n_frames - start) >= window {
        spans.push((start, n_frames));
    }
    Ok(spans)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub probability: f64,
}

/// CSV with header `t_start_s,t_end_s,probability`, six decimals.
pub fn scan_to_csv(points: &[ScanPoint]) -> String {
    let mut out = String::from("t_start_s,t_end_s,probability\n");
    for p in points {
        out.push_str(&format!("{:.6},{:.6},{:.6}\n", p.t_start_s, p.t_end_s, p.probability));
    }
    out
}

/// Kernel-3 convolution with zero padding 1, as an unfolded matmul.
fn conv3<F: Scalar>(g: &mut Graph<F>, bound: &Binding, lin: &Linear, x: Var, stride: usize) -> Result<Var, NumericsError> {
    let (t, c) = g.value(x).dims2()?;
    let pad = g.constant(Tensor::zeros(&[1, c]));
    let padded = g.concat(&[pad, x, pad], 0)?;
    let t_out = (t - 1) / stride + 1;
    let taps: Vec<Var> = (0..3)
        .map(|k| {
            if stride == 1 {
                g.slice(padded, 0, k, k + t)
            } else {
                let rows: Vec<usize> = (0..t_out).map(|i| i * stride + k).collect();
                g.gather(padded, &rows)
            }
        })
        .collect::<Result<_, _>>()?;
    let unfolded = g.concat(&taps, 1)?;
    lin.apply(g, bound, unfolded)
}

fn positional_encoding<F: Scalar>(t: usize, d: usize) -> Tensor<F> {
    let mut data = vec![0.0f64; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_f64(&[t, d], &data).expect("positional encoding shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_norms(cfg: &ClassifierConfig, rng: &mut impl Rng) -> KeywordNormParams<f64> {
        let d = cfg.d_model;
        KeywordNormParams {
            gains: (0..cfg.n_adain()).map(|_| uniform(rng, &[d], 1.5)).collect(),
            biases: (0..cfg.n_adain()).map(|_| uniform(rng, &[d], 1.0)).collect(),
        }
    }

    fn random_mel(rng: &mut impl Rng, t: usize, f: usize) -> MelSpectrogram {
        let data = (0..t * f).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        MelSpectrogram::new(data, t, f).unwrap()
    }

    #[test]
    fn adain_hand_example() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 4.0, 3.0, 8.0]).unwrap());
        let gain = g.constant(Tensor::vector(vec![2.0, 2.0]));
        let bias = g.constant(Tensor::vector(vec![5.0, 5.0]));
        let out = adain(&mut g, z, 2, gain, bias, 0.0).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 3.0, 7.0, 7.0]);
    }

    #[test]
    fn adain_identity_params_and_degenerate_channel() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(&[3, 2], &[1.0, 7.0, 2.0, 7.0, 6.0, 7.0]).unwrap());
        let gain = g.constant(Tensor::ones(&[2]));
        let bias = g.constant(Tensor::vector(vec![0.0, 0.25]));
        let out = adain(&mut g, z, 3, gain, bias, 1e-5).unwrap();
        let v = g.value(out);
        let col0: Vec<f64> = (0..3).map(|t| v.get2(t, 0)).collect();
        let mean: f64 = col0.iter().sum::<f64>() / 3.0;
        let var: f64 = col0.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        let raw_var: f64 = 14.0 / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - (raw_var / (raw_var + 1e-5)).sqrt()).abs() < 1e-12);
        // constant channel collapses to its bias
        assert!((0..3).all(|t| v.get2(t, 1) == 0.25));
    }

    #[test]
    fn adain_padding_rows_are_zero() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(&[3, 1], &[1.0, 3.0, 100.0]).unwrap());
        let gain = g.constant(Tensor::ones(&[1]));
        let bias = g.constant(Tensor::vector(vec![0.5]));
        let out = adain(&mut g, z, 2, gain, bias, 0.0).unwrap();
        assert_eq!(g.value(out).data(), &[-0.5, 1.5, 0.0]);
        assert!(matches!(adain(&mut g, z, 0, gain, bias, 0.0), Err(ClassifierError::ZeroValidLength(_))));
        let wide = g.constant(Tensor::ones(&[2]));
        assert!(matches!(adain(&mut g, z, 2, wide, bias, 0.0), Err(ClassifierError::Numerics(_))));
    }

    #[test]
    fn config_validation() {
        assert!(ClassifierConfig::desk().validate().is_ok());
        assert!(ClassifierConfig::tiny().validate().is_ok());
        let bad = ClassifierConfig {
            n_heads: 5,
            ..ClassifierConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = ClassifierConfig {
            n_adaptive_blocks: 3,
            ..ClassifierConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_sublayers_make_block_identity() {
        let cfg = ClassifierConfig::toy();
        let mut model = AudioClassifier::<f64>::new(cfg, &mut rng(0)).unwrap();
        model.zero_block_outputs();
        let mut r = rng(1);
        let norms = random_norms(&cfg, &mut r);
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g, false);
        let z = g.constant(uniform(&mut r, &[5, cfg.d_model], 2.0));
        let bn = bind_norms(&mut g, &norms, false);
        let out = model.record_block(&mut g, &bound, 0, z, 5, bn[0]).unwrap();
        assert_eq!(g.value(out), g.value(z));
    }

    #[test]
    fn block_ignores_padding_content() {
        let cfg = ClassifierConfig::toy();
        let model = AudioClassifier::<f64>::new(cfg, &mut rng(2)).unwrap();
        let mut r = rng(3);
        let norms = random_norms(&cfg, &mut r);
        let base = uniform::<f64>(&mut r, &[6, cfg.d_model], 1.0);
        let run = |z: Tensor<f64>| {
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g, false);
            let z = g.constant(z);
            let bn = bind_norms(&mut g, &norms, false);
            let out = model.record_block(&mut g, &bound, 1, z, 4, bn[1]).unwrap();
            g.value(out).clone()
        };
        let mut perturbed = base.clone();
        for v in &mut perturbed.data_mut()[4 * cfg.d_model..] {
            *v += 123.0;
        }
        let (a, b) = (run(base), run(perturbed));
        assert_eq!(&a.data()[..4 * cfg.d_model], &b.data()[..4 * cfg.d_model]);
        assert!(a.data()[4 * cfg.d_model..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_head_gives_one_half() {
        let cfg = ClassifierConfig::toy();
        let mut model = AudioClassifier::<f64>::new(cfg, &mut rng(4)).unwrap();
        model.zero_head();
        let mut r = rng(5);
        let norms = random_norms(&cfg, &mut r);
        let x = features_tensor(&random_mel(&mut r, 9, cfg.n_features)).unwrap();
        assert_eq!(model.forward_one(&x, &norms).unwrap(), 0.5);
    }

    #[test]
    fn batch_is_permutation_equivariant_and_padding_invariant() {
        let cfg = ClassifierConfig::toy();
        let model = AudioClassifier::<f64>::new(cfg, &mut rng(6)).unwrap();
        let mut r = rng(7);
        let mels: Vec<MelSpectrogram> = [7, 12, 4].iter().map(|&t| random_mel(&mut r, t, cfg.n_features)).collect();
        let norms: Vec<KeywordNormParams<f64>> = (0..3).map(|_| random_norms(&cfg, &mut r)).collect();
        let refs: Vec<&MelSpectrogram> = mels.iter().collect();
        let batch = PaddedBatchFeatures::from_examples(&refs).unwrap();
        let probs = model.forward(&batch, &norms.iter().collect::<Vec<_>>()).unwrap();

        let order = [2, 0, 1, 0];
        let refs2: Vec<&MelSpectrogram> = order.iter().map(|&i| &mels[i]).collect();
        let mut batch2 = PaddedBatchFeatures::from_examples(&refs2).unwrap();
        // garbage in the padded region must not matter
        let (t_max, f) = (batch2.t_max(), batch2.n_features());
        let lengths = batch2.lengths().to_vec();
        for (b, len) in lengths.iter().enumerate() {
            for v in &mut batch2.data_mut()[b * t_max * f + len * f..(b + 1) * t_max * f] {
                *v = 9.0;
            }
        }
        let probs2 = model.forward(&batch2, &order.iter().map(|&i| &norms[i]).collect::<Vec<_>>()).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(probs2[k], probs[i]);
        }
    }

    #[test]
    fn different_keyword_parameters_change_output() {
        let cfg = ClassifierConfig::toy();
        let model = AudioClassifier::<f64>::new(cfg, &mut rng(8)).unwrap();
        let mut r = rng(9);
        let x = features_tensor(&random_mel(&mut r, 10, cfg.n_features)).unwrap();
        let max_delta = (0..32)
            .map(|_| {
                let a = model.forward_one(&x, &random_norms(&cfg, &mut r)).unwrap();
                let b = model.forward_one(&x, &random_norms(&cfg, &mut r)).unwrap();
                (a - b).abs()
            })
            .fold(0.0, f64::max);
        assert!(max_delta > 0.0);
    }

    #[test]
    fn scan_windows_rules() {
        assert_eq!(scan_windows(20, 20, 3).unwrap(), vec![(0, 20)]);
        assert_eq!(scan_windows(20, 8, 8).unwrap(), vec![(0, 8), (8, 16), (16, 20)]);
        assert_eq!(scan_windows(21, 8, 8).unwrap(), vec![(0, 8), (8, 16), (16, 21)]);
        assert_eq!(scan_windows(19, 8, 8).unwrap(), vec![(0, 8), (8, 16)]);
        assert!(matches!(
            scan_windows(10, 12, 1),
            Err(ClassifierError::WindowLargerThanUtterance { window: 12, frames: 10 })
        ));
        assert!(scan_windows(10, 4, 1).is_err());
        assert!(scan_windows(10, 8, 0).is_err());
    }

    #[test]
    fn scan_full_window_equals_forward() {
        let cfg = ClassifierConfig::toy();
        let model = AudioClassifier::<f32>::new(cfg, &mut rng(10)).unwrap();
        let mut r = rng(11);
        let mel = random_mel(&mut r, 16, cfg.n_features);
        let norms = random_norms(&cfg, &mut r).cast::<f32>();
        let trace = model.scan(&mel, &norms, 16, 5).unwrap();
        assert_eq!(trace.len(), 1);
        let p = model.forward_one(&features_tensor(&mel).unwrap(), &norms).unwrap();
        assert_eq!(trace[0].probability, p as f64);
        assert_eq!((trace[0].t_start_s, trace[0].t_end_s), (0.0, 0.16));
        let csv = scan_to_csv(&trace);
        assert!(csv.starts_with("t_start_s,t_end_s,probability\n0.000000,0.160000,"));
    }

    #[test]
    fn block_gradient_check() {
        use crate::numerics::grad_check_sampled;
        let cfg = ClassifierConfig::toy();
        let model = AudioClassifier::<f64>::new(cfg, &mut rng(12)).unwrap();
        let mut r = rng(13);
        let norms = random_norms(&cfg, &mut r);
        let z = uniform::<f64>(&mut r, &[3, cfg.d_model], 1.0);
        let mut params: Vec<Tensor<f64>> = model.params().tensors().to_vec();
        let n_theta = params.len();
        params.extend(norms.gains.iter().take(2).cloned());
        params.extend(norms.biases.iter().take(2).cloned());
        params.push(z);
        let report = grad_check_sampled(
            |g, vars| {
                let bound = Binding::from_vars(vars[..n_theta].to_vec());
                let bn = BlockNorms {
                    gain_attn: vars[n_theta],
                    gain_mlp: vars[n_theta + 1],
                    bias_attn: vars[n_theta + 2],
                    bias_mlp: vars[n_theta + 3],
                };
                let out = model
                    .record_block(g, &bound, 0, vars[n_theta + 4], 3, bn)
                    .map_err(|e| NumericsError::ShapeMismatch(e.to_string()))?;
                let t = g.tanh(out)?;
                Ok(g.sum(t)?)
            },
            &params,
            1e-4,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn adain_output_statistics(
                (t, d, z) in (2usize..10, 1usize..5).prop_flat_map(|(t, d)| {
                    (Just(t), Just(d), prop::collection::vec(-10.0f64..10.0, t * d))
                }),
                gain in prop::collection::vec(-3.0f64..3.0, 4),
                bias in prop::collection::vec(-3.0f64..3.0, 4),
                eps in prop_oneof![Just(0.0), Just(1e-5), 1e-6f64..1e-2],
            ) {
                let col = |c: usize| (0..t).map(|r| z[r * d + c]).collect::<Vec<f64>>();
                let stats = |v: &[f64]| {
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64)
                };
                prop_assume!((0..d).all(|c| stats(&col(c)).1 > 1e-3));
                let mut g = Graph::<f64>::new();
                let zv = g.constant(Tensor::from_f64(&[t, d], &z).unwrap());
                let gv = g.constant(Tensor::vector(gain[..d].to_vec()));
                let bv = g.constant(Tensor::vector(bias[..d].to_vec()));
                let out = adain(&mut g, zv, t, gv, bv, eps).unwrap();
                let out = g.value(out);
                for c in 0..d {
                    let (_, var_in) = stats(&col(c));
                    let oc: Vec<f64> = (0..t).map(|r| out.get2(r, c)).collect();
                    let (m, v) = stats(&oc);
                    prop_assert!((m - bias[c]).abs() < 1e-5);
                    let expected = gain[c].abs() * (var_in / (var_in + eps)).sqrt();
                    prop_assert!((v.sqrt() - expected).abs() < 1e-4);
                }
            }
        }
    }
}
