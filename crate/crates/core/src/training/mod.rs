//! Joint training of the audio classifier `θ` and the text encoder `φ`.
//!
//! A step encodes each distinct batch keyword once, runs one classifier graph
//! per example with the keyword parameters `θ_v` as leaves, and pushes the
//! accumulated `∂L/∂θ_v` back through the text encoder.

mod checkpoint;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, RngState, CHECKPOINT_VERSION};

use crate::classifier::{group_norms, AudioClassifier, ClassifierConfig, ClassifierError};
use crate::data::{eval_pairs, io_err, plan_batch, resolve_batch, AssembledBatch, DataError, Example};
use crate::metrics::{EvalReport, MetricsError, ScoredPair};
use crate::negatives::{KeywordVocab, NegativeConfig};
use crate::numerics::{Graph, NumericsError, Scalar, Tensor, Var};
use crate::params::{Binding, ParamStore};
use crate::text_encoder::{CharVocab, EncodedKeywords, KeywordNormParams, TextEncoder, TextError};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;
pub const LOSS_CSV: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

const MODEL_STREAM: u64 = 11;
const TRAIN_STREAM: u64 = 12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Text-encoder learning rate α.
    pub text_lr: f64,
    /// Classifier learning rate η.
    pub classifier_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub negatives: NegativeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Laptop-scale run: 32 examples per batch, 10 epochs.
    pub fn desk() -> Self {
        Self {
            text_lr: 1e-4,
            classifier_lr: 1e-4,
            batch_size: 32,
            epochs: 10,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            negatives: NegativeConfig::default(),
        }
    }

    /// Full-scale schedule: 144 examples per batch, 25 epochs.
    pub fn paper() -> Self {
        Self {
            batch_size: 144,
            epochs: 25,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.text_lr >= 0.0 && self.classifier_lr >= 0.0 && self.text_lr.is_finite() && self.classifier_lr.is_finite()) {
            return bad(format!("learning rates must be finite and non-negative ({}, {})", self.text_lr, self.classifier_lr));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!("batch size {} must be even and at least 2", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("Adam hyper-parameters out of range".into());
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!("clip_norm {} must be non-negative", self.clip_norm));
        }
        Ok(())
    }
}

/// Classifier and text encoder together.
#[derive(Debug)]
pub struct KwsModel<F> {
    pub classifier: AudioClassifier<F>,
    pub text: TextEncoder<F>,
}

impl<F: Scalar> Clone for KwsModel<F> {
    fn clone(&self) -> Self {
        Self {
            classifier: self.classifier.clone(),
            text: self.text.clone(),
        }
    }
}

impl<F: Scalar> KwsModel<F> {
    pub fn new(config: ClassifierConfig, vocab: CharVocab, seed: u64) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(MODEL_STREAM);
        let classifier = AudioClassifier::new(config, &mut rng)?;
        let text = TextEncoder::new(vocab, config.d_model, config.n_adain(), &mut rng);
        Ok(Self { classifier, text })
    }

    pub fn config(&self) -> &ClassifierConfig {
        self.classifier.config()
    }

    pub fn cast<G: Scalar>(&self) -> KwsModel<G> {
        KwsModel {
            classifier: self.classifier.cast(),
            text: self.text.cast(),
        }
    }

    /// `P(keyword | features)` from scratch: encodes the keyword, then runs the classifier.
    pub fn probability(&self, features: &Tensor<F>, keyword: &str) -> Result<F, TrainError> {
        let (norms, _) = self.text.encode_keyword(keyword)?;
        Ok(self.classifier.forward_one(features, &norms)?)
    }
}

/// `−(y log p + (1 − y) log(1 − p))` averaged over the batch, with `p` clamped.
pub fn bce_loss(probs: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

/// Records `weight · BCE(prob, label)` on `g`.
pub fn record_bce<F: Scalar>(g: &mut Graph<F>, prob: Var, label: bool, weight: F) -> Result<Var, NumericsError> {
    let lo = F::from_f64_lossy(PROB_CLAMP);
    let p = g.clamp(prob, lo, F::one() - lo)?;
    let target = if label {
        p
    } else {
        let neg = g.scale(p, -F::one())?;
        g.add_scalar(neg, F::one())?
    };
    let log = g.log(target)?;
    g.scale(log, -weight)
}

/// One step's summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub pos_acc: f64,
    pub neg_acc: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,loss,pos_acc,neg_acc";

    pub fn csv_line(&self) -> String {
        format!("{},{:.8},{:.6},{:.6}", self.step, self.loss, self.pos_acc, self.neg_acc)
    }
}

/// Gradients for `θ` and `φ` in parameter-store order; frozen entries are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradients<F> {
    pub loss: f64,
    pub probs: Vec<F>,
    pub theta: Vec<Tensor<F>>,
    pub phi: Vec<Tensor<F>>,
}

/// Encoder graph over a sorted set of distinct keywords.
pub struct TextPass<F> {
    graph: Graph<F>,
    enc: EncodedKeywords,
    binding: Binding,
    index: BTreeMap<String, usize>,
}

impl<F: Scalar> TextPass<F> {
    pub fn new(text: &TextEncoder<F>, keywords: &[String], trainable: bool) -> Result<Self, TrainError> {
        let mut sorted = keywords.to_vec();
        sorted.sort();
        sorted.dedup();
        let refs: Vec<&str> = sorted.iter().map(String::as_str).collect();
        let tokens = text.tokenize_all(&refs)?;
        let mut graph = Graph::new().with_finite_check(false);
        let binding = text.params().bind(&mut graph, trainable);
        let enc = text.record(&mut graph, &binding, &tokens)?;
        let index = sorted.into_iter().enumerate().map(|(i, k)| (k, i)).collect();
        Ok(Self {
            graph,
            enc,
            binding,
            index,
        })
    }

    pub fn contains(&self, keyword: &str) -> bool {
        self.index.contains_key(keyword)
    }

    pub fn embedding(&self, keyword: &str) -> Option<Vec<f64>> {
        let k = *self.index.get(keyword)?;
        Some(self.graph.value(self.enc.embedding).row(k).iter().map(|v| v.to_f64_lossy()).collect())
    }

    pub fn norms(&self, keyword: &str) -> Option<KeywordNormParams<F>> {
        let k = *self.index.get(keyword)?;
        let row = |v: &Var| Tensor::vector(self.graph.value(*v).row(k).to_vec());
        Some(KeywordNormParams {
            gains: self.enc.gains.iter().map(row).collect(),
            biases: self.enc.biases.iter().map(row).collect(),
        })
    }

    /// `(∇_φ θ_v)ᵀ g` for per-keyword cotangents `g`, one `K × d` matrix per output.
    pub fn pull_back(&self, gain_seeds: Vec<Tensor<F>>, bias_seeds: Vec<Tensor<F>>, store: &ParamStore<F>) -> Result<Vec<Tensor<F>>, TrainError> {
        let seeds: Vec<(Var, Tensor<F>)> = self
            .enc
            .gains
            .iter()
            .copied()
            .zip(gain_seeds)
            .chain(self.enc.biases.iter().copied().zip(bias_seeds))
            .collect();
        let mut grads = self.graph.backward_with(&seeds)?;
        Ok(collect_grads(&mut grads, &self.binding, store))
    }
}

fn collect_grads<F: Scalar>(grads: &mut crate::numerics::Gradients<F>, binding: &Binding, store: &ParamStore<F>) -> Vec<Tensor<F>> {
    store
        .ids()
        .map(|id| {
            grads
                .take(binding.var(id))
                .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
        })
        .collect()
}

struct ExampleResult<F> {
    loss: f64,
    prob: F,
    theta: Vec<Tensor<F>>,
    gains: Vec<Tensor<F>>,
    biases: Vec<Tensor<F>>,
}

/// Gradients via the factorized path: classifier graphs per example, then the
/// text encoder's vector-Jacobian product seeded with `∂L/∂θ_v`.
pub fn two_stage_gradients<F: Scalar>(model: &KwsModel<F>, batch: &AssembledBatch, text: &TextPass<F>) -> Result<BatchGradients<F>, TrainError> {
    let n = batch.len();
    let weight = F::one() / F::from_usize(n).expect("batch size");
    let classifier = &model.classifier;
    let results: Vec<ExampleResult<F>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<ExampleResult<F>, TrainError> {
            let norms = text
                .norms(&batch.keywords[i])
                .ok_or_else(|| TrainError::InvalidConfig(format!("keyword {:?} was not encoded", batch.keywords[i])))?;
            let mut g = Graph::new().with_finite_check(false);
            let bound = classifier.params().bind(&mut g, true);
            let x = g.constant(batch.features.example(i)?);
            let layers: Vec<(Var, Var)> = norms
                .gains
                .iter()
                .zip(&norms.biases)
                .map(|(gain, bias)| (g.param(gain.clone()), g.param(bias.clone())))
                .collect();
            let block_norms = group_norms(&layers);
            let prob = classifier.record_example(&mut g, &bound, x, &block_norms)?;
            let loss = record_bce(&mut g, prob, batch.labels[i], weight)?;
            let mut grads = g.backward(loss)?;
            let gains = layers.iter().map(|(gv, _)| grads.take(*gv).expect("leaf gradient")).collect();
            let biases = layers.iter().map(|(_, bv)| grads.take(*bv).expect("leaf gradient")).collect();
            Ok(ExampleResult {
                loss: g.value(loss).data()[0].to_f64_lossy(),
                prob: g.value(prob).data()[0],
                theta: collect_grads(&mut grads, &bound, classifier.params()),
                gains,
                biases,
            })
        })
        .collect::<Result<_, _>>()?;

    let d = model.config().d_model;
    let k = text.index.len();
    let n_layers = model.config().n_adain();
    let mut theta: Vec<Tensor<F>> = classifier.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut gain_seeds = vec![Tensor::zeros(&[k, d]); n_layers];
    let mut bias_seeds = vec![Tensor::zeros(&[k, d]); n_layers];
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(n);
    for (i, r) in results.into_iter().enumerate() {
        loss += r.loss;
        probs.push(r.prob);
        for (acc, gr) in theta.iter_mut().zip(&r.theta) {
            acc.add_assign(gr);
        }
        let row = text.index[&batch.keywords[i]];
        for l in 0..n_layers {
            add_row(&mut gain_seeds[l], row, &r.gains[l]);
            add_row(&mut bias_seeds[l], row, &r.biases[l]);
        }
    }
    let phi = text.pull_back(gain_seeds, bias_seeds, model.text.params())?;
    Ok(BatchGradients { loss, probs, theta, phi })
}

fn add_row<F: Scalar>(m: &mut Tensor<F>, row: usize, v: &Tensor<F>) {
    let d = v.len();
    for (a, &b) in m.data_mut()[row * d..(row + 1) * d].iter_mut().zip(v.data()) {
        *a = *a + b;
    }
}

/// Gradients from one graph holding the text encoder and every example.
pub fn end_to_end_gradients<F: Scalar>(model: &KwsModel<F>, batch: &AssembledBatch) -> Result<BatchGradients<F>, TrainError> {
    let mut distinct = batch.distinct_keywords();
    distinct.sort();
    let refs: Vec<&str> = distinct.iter().map(String::as_str).collect();
    let tokens = model.text.tokenize_all(&refs)?;
    let mut g = Graph::new().with_finite_check(false);
    let phi = model.text.params().bind(&mut g, true);
    let theta = model.classifier.params().bind(&mut g, true);
    let enc = model.text.record(&mut g, &phi, &tokens)?;
    let d = model.config().d_model;
    let weight = F::one() / F::from_usize(batch.len()).expect("batch size");
    let mut losses = Vec::with_capacity(batch.len());
    let mut probs = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let k = distinct.binary_search(&batch.keywords[i]).expect("encoded");
        let mut layers = Vec::with_capacity(enc.gains.len());
        for (&gm, &bm) in enc.gains.iter().zip(&enc.biases) {
            let gain = g.slice(gm, 0, k, k + 1)?;
            let gain = g.reshape(gain, &[d])?;
            let bias = g.slice(bm, 0, k, k + 1)?;
            let bias = g.reshape(bias, &[d])?;
            layers.push((gain, bias));
        }
        let x = g.constant(batch.features.example(i)?);
        let prob = model.classifier.record_example(&mut g, &theta, x, &group_norms(&layers))?;
        probs.push(prob);
        losses.push(record_bce(&mut g, prob, batch.labels[i], weight)?);
    }
    let parts: Vec<Var> = losses.clone();
    let stacked = g.concat(&parts, 0)?;
    let total = g.sum(stacked)?;
    let mut grads = g.backward(total)?;
    Ok(BatchGradients {
        loss: g.value(total).data()[0].to_f64_lossy(),
        probs: probs.iter().map(|&p| g.value(p).data()[0]).collect(),
        theta: collect_grads(&mut grads, &theta, model.classifier.params()),
        phi: collect_grads(&mut grads, &phi, model.text.params()),
    })
}

/// First-order optimizer state for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<F> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(cfg: &TrainConfig, lr: f64, shapes: &ParamStore<F>) -> Self {
        let zeros = || shapes.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            kind: cfg.optimizer,
            lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update; frozen tensors are left untouched.
    pub fn apply(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>]) {
        self.step += 1;
        if self.lr == 0.0 {
            return;
        }
        let lr = F::from_f64_lossy(self.lr);
        let (b1, b2) = (F::from_f64_lossy(self.beta1), F::from_f64_lossy(self.beta2));
        let eps = F::from_f64_lossy(self.eps);
        let c1 = F::from_f64_lossy(1.0 - self.beta1.powi(self.step as i32));
        let c2 = F::from_f64_lossy(1.0 - self.beta2.powi(self.step as i32));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if store.is_frozen(id) {
                continue;
            }
            let g = grads[i].data();
            let p = store.get_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, &g) in p.iter_mut().zip(g) {
                        *p = *p - lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                        v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Scales both gradient groups so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(groups: &mut [&mut Vec<Tensor<F>>], max_norm: f64) -> f64 {
    let sq: f64 = groups
        .iter()
        .flat_map(|g| g.iter())
        .flat_map(|t| t.data().iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::from_f64_lossy(max_norm / norm);
        for group in groups.iter_mut() {
            for t in group.iter_mut() {
                for v in t.data_mut() {
                    *v = *v * s;
                }
            }
        }
    }
    norm
}

/// Owns the model, both optimizers, and the sampling stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: KwsModel<f32>,
    pub config: TrainConfig,
    pub opt_theta: Optimizer<f32>,
    pub opt_phi: Optimizer<f32>,
    rng: ChaCha8Rng,
    step: u64,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: KwsModel<f32>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            opt_theta: Optimizer::new(&config, config.classifier_lr, model.classifier.params()),
            opt_phi: Optimizer::new(&config, config.text_lr, model.text.params()),
            model,
            config,
            rng,
            step: 0,
            epoch: 0,
        })
    }

    /// Fresh model and trainer from the configuration's seed.
    pub fn from_scratch(classifier: ClassifierConfig, vocab: CharVocab, config: TrainConfig) -> Result<Self, TrainError> {
        let model = KwsModel::new(classifier, vocab, config.seed)?;
        Self::new(model, config)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Samples pairs for `sources`, then runs [`Trainer::train_on_batch`].
    pub fn train_step(&mut self, examples: &[Example], sources: &[usize], vocab: &KeywordVocab) -> Result<LossRecord, TrainError> {
        let plan = plan_batch(examples, sources, vocab, &self.config.negatives, &mut self.rng)?;
        let mut keywords: Vec<String> = plan.positives.clone();
        keywords.extend(plan.negatives.iter().filter_map(|n| match n {
            crate::negatives::PendingNegative::Ready(k) => Some(k.clone()),
            crate::negatives::PendingNegative::NearestInBatch => None,
        }));
        let mut text = TextPass::new(&self.model.text, &keywords, true)?;
        let embeddings: Option<Vec<Vec<f64>>> = plan
            .needs_embeddings()
            .then(|| plan.batch_keywords().iter().map(|k| text.embedding(k).expect("encoded")).collect());
        let batch = resolve_batch(examples, plan, embeddings.as_deref(), vocab, &mut self.rng)?;
        if batch.keywords.iter().any(|k| !text.contains(k)) {
            text = TextPass::new(&self.model.text, &batch.keywords, true)?;
        }
        self.train_on_batch(&batch, &text)
    }

    /// Gradient step on an assembled batch whose keywords `text` has encoded.
    pub fn train_on_batch(&mut self, batch: &AssembledBatch, text: &TextPass<f32>) -> Result<LossRecord, TrainError> {
        let mut grads = two_stage_gradients(&self.model, batch, text)?;
        let finite = grads.loss.is_finite() && grads.theta.iter().chain(&grads.phi).all(Tensor::all_finite);
        if !finite {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                detail: format!(
                    "loss {} on keywords {:?} (labels {:?}, sources {:?})",
                    grads.loss, batch.keywords, batch.labels, batch.sources
                ),
            });
        }
        clip_global_norm(&mut [&mut grads.theta, &mut grads.phi], self.config.clip_norm);
        self.opt_theta.apply(self.model.classifier.params_mut(), &grads.theta);
        self.opt_phi.apply(self.model.text.params_mut(), &grads.phi);
        let half = batch.len() / 2;
        let hits = |range: std::ops::Range<usize>, want: bool| {
            range.clone().filter(|&i| (grads.probs[i] >= 0.5) == want).count() as f64 / range.len() as f64
        };
        let record = LossRecord {
            step: self.step,
            loss: grads.loss,
            pos_acc: hits(0..half, true),
            neg_acc: hits(half..batch.len(), false),
        };
        self.step += 1;
        Ok(record)
    }

    /// One pass over shuffled utterances; an incomplete final batch is dropped.
    pub fn run_epoch(&mut self, examples: &[Example], vocab: &KeywordVocab, mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>, TrainError> {
        let half = self.config.batch_size / 2;
        let mut order: Vec<usize> = (0..examples.len())
            .filter(|&i| !examples[i].transcript.eligible_keywords().is_empty())
            .collect();
        if order.len() < half {
            return Err(DataError::NotEnoughExamples {
                needed: half,
                available: order.len(),
            }
            .into());
        }
        order.shuffle(&mut self.rng);
        let mut records = Vec::with_capacity(order.len() / half);
        for chunk in order.chunks_exact(half) {
            let r = self.train_step(examples, chunk, vocab)?;
            on_step(&r);
            records.push(r);
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Trains up to `config.epochs`, resuming from the current epoch.
    ///
    /// With an output directory, writes `checkpoint_epochNNN.ckpt` after each
    /// epoch, keeps `checkpoint.ckpt` current, and appends to `loss.csv`.
    pub fn fit(&mut self, examples: &[Example], vocab: &KeywordVocab, out_dir: Option<&Path>) -> Result<Vec<LossRecord>, TrainError> {
        let mut csv = match out_dir {
            Some(dir) => Some(LossCsv::open(dir, self.step)?),
            None => None,
        };
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            let records = self.run_epoch(examples, vocab, |r| {
                log::debug!("step {} loss {:.4} pos {:.2} neg {:.2}", r.step, r.loss, r.pos_acc, r.neg_acc)
            })?;
            if let Some(last) = records.last() {
                log::info!(
                    "epoch {}/{}: step {} loss {:.4} pos_acc {:.3} neg_acc {:.3}",
                    self.epoch,
                    self.config.epochs,
                    last.step,
                    last.loss,
                    last.pos_acc,
                    last.neg_acc
                );
            }
            if let (Some(dir), Some(csv)) = (out_dir, csv.as_mut()) {
                csv.append(&records)?;
                let ckpt = self.checkpoint();
                ckpt.save(dir.join(format!("checkpoint_epoch{:03}.ckpt", self.epoch)))?;
                ckpt.save(dir.join(CHECKPOINT_FILE))?;
            }
            all.extend(records);
        }
        if let Some(dir) = out_dir {
            if self.config.epochs == 0 || !dir.join(CHECKPOINT_FILE).exists() {
                self.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
            }
        }
        Ok(all)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            classifier_config: *self.model.config(),
            train_config: Some(self.config.clone()),
            vocab: self.model.text.vocab().clone(),
            theta: self.model.classifier.params().clone(),
            phi: self.model.text.params().clone(),
            optimizers: Some((self.opt_theta.clone(), self.opt_phi.clone())),
            rng: Some(RngState::capture(&self.rng)),
            step: self.step,
            epoch: self.epoch,
        }
    }

    /// Restores a trainer; the stored training configuration is used unless overridden.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: Option<TrainConfig>) -> Result<Self, TrainError> {
        let config = config
            .or_else(|| ckpt.train_config.clone())
            .ok_or_else(|| TrainError::InvalidConfig("checkpoint has no training configuration".into()))?;
        let mut trainer = Self::new(ckpt.model()?, config)?;
        if let Some((t, p)) = &ckpt.optimizers {
            trainer.opt_theta = t.clone();
            trainer.opt_phi = p.clone();
            trainer.opt_theta.lr = trainer.config.classifier_lr;
            trainer.opt_phi.lr = trainer.config.text_lr;
        }
        if let Some(state) = &ckpt.rng {
            trainer.rng = state.restore();
        }
        trainer.step = ckpt.step;
        trainer.epoch = ckpt.epoch;
        Ok(trainer)
    }
}

struct LossCsv {
    path: PathBuf,
}

impl LossCsv {
    /// Starts a fresh file at step 0; otherwise keeps rows before `step`.
    fn open(dir: &Path, step: u64) -> Result<Self, TrainError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOSS_CSV);
        let mut kept = vec![LossRecord::CSV_HEADER.to_string()];
        if step > 0 {
            if let Ok(text) = fs::read_to_string(&path) {
                kept.extend(
                    text.lines()
                        .skip(1)
                        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step))
                        .map(String::from),
                );
            }
        }
        fs::write(&path, kept.join("\n") + "\n").map_err(io_err(&path))?;
        Ok(Self { path })
    }

    fn append(&mut self, records: &[LossRecord]) -> Result<(), TrainError> {
        let mut f = fs::OpenOptions::new().append(true).open(&self.path).map_err(io_err(&self.path))?;
        for r in records {
            writeln!(f, "{}", r.csv_line()).map_err(io_err(&self.path))?;
        }
        Ok(())
    }
}

/// Probability for every `(example, keyword)` query, encoding each keyword once.
pub fn score_queries<F: Scalar>(model: &KwsModel<F>, examples: &[Example], queries: &[(usize, String)]) -> Result<Vec<F>, TrainError> {
    let mut keywords: Vec<String> = queries.iter().map(|(_, k)| k.clone()).collect();
    keywords.sort();
    keywords.dedup();
    let mut cache: BTreeMap<String, KeywordNormParams<F>> = BTreeMap::new();
    for chunk in keywords.chunks(64) {
        let text = TextPass::new(&model.text, chunk, false)?;
        for k in chunk {
            cache.insert(k.clone(), text.norms(k).expect("encoded"));
        }
    }
    queries
        .par_iter()
        .map(|(i, k)| {
            let x = crate::classifier::features_tensor::<F>(&examples[*i].features)?;
            Ok(model.classifier.forward_one(&x, &cache[k])?)
        })
        .collect()
}

/// Samples labelled evaluation pairs, scores them, and summarizes.
pub fn evaluate(
    model: &KwsModel<f32>,
    examples: &[Example],
    vocab: &KeywordVocab,
    negatives: &NegativeConfig,
    pairs_per_utterance: usize,
    threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(EvalReport, Vec<ScoredPair>), TrainError> {
    let pairs = eval_pairs(examples, vocab, negatives, pairs_per_utterance, rng)?;
    let queries: Vec<(usize, String)> = pairs.iter().map(|p| (p.source, p.keyword.clone())).collect();
    let probs = score_queries(model, examples, &queries)?;
    let scored: Vec<ScoredPair> = pairs
        .iter()
        .zip(probs)
        .map(|(p, s)| ScoredPair {
            keyword: p.keyword.clone(),
            label: p.label,
            strategy: p.strategy.map(|s| s.name().to_string()),
            score: f64::from(s),
        })
        .collect();
    let report = EvalReport::from_pairs(&scored, threshold)?;
    Ok((report, scored))
}

#[cfg(test)]
mod tests;
