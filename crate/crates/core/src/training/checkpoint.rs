//! Checkpoint container.
//!
//! Layout: the 8-byte magic `KWSCKPT1`, a little-endian `u64` header length,
//! a JSON header (configurations, vocabulary, tensor manifest, optimizer and
//! generator state), then every tensor as little-endian `f32`, back to back.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{KwsModel, OptimizerKind, Optimizer, TrainConfig};
use crate::classifier::ClassifierConfig;
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::text_encoder::CharVocab;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"KWSCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint does not match the model layout: {0}")]
    Layout(String),
}

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).unwrap_or(0);
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().unwrap_or(0));
        rng
    }

    fn validate(&self) -> Result<(), CheckpointError> {
        let hex_ok = self.seed.len() == 64 && self.seed.chars().all(|c| c.is_ascii_hexdigit());
        if !hex_ok || self.word_pos.parse::<u128>().is_err() {
            return Err(CheckpointError::Header("malformed generator state".into()));
        }
        Ok(())
    }
}

/// Everything needed to resume training or serve the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub classifier_config: ClassifierConfig,
    pub train_config: Option<TrainConfig>,
    pub vocab: CharVocab,
    pub theta: ParamStore<f32>,
    pub phi: ParamStore<f32>,
    /// `(θ optimizer, φ optimizer)`.
    pub optimizers: Option<(Optimizer<f32>, Optimizer<f32>)>,
    pub rng: Option<RngState>,
    pub step: u64,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    classifier_config: ClassifierConfig,
    train_config: Option<TrainConfig>,
    vocab: CharVocab,
    step: u64,
    epoch: usize,
    rng: Option<RngState>,
    optimizers: Option<(OptimizerMeta, OptimizerMeta)>,
    tensors: Vec<TensorEntry>,
}

fn meta(o: &Optimizer<f32>) -> OptimizerMeta {
    OptimizerMeta {
        kind: o.kind,
        lr: o.lr,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        step: o.step,
    }
}

impl Checkpoint {
    /// Untrained checkpoint for a model.
    pub fn from_model(model: &KwsModel<f32>) -> Self {
        Self {
            classifier_config: *model.config(),
            train_config: None,
            vocab: model.text.vocab().clone(),
            theta: model.classifier.params().clone(),
            phi: model.text.params().clone(),
            optimizers: None,
            rng: None,
            step: 0,
            epoch: 0,
        }
    }

    /// Rebuilds the model; parameter names and shapes must match the configuration.
    pub fn model(&self) -> Result<KwsModel<f32>, CheckpointError> {
        let skeleton = KwsModel::<f32>::new(self.classifier_config, self.vocab.clone(), 0)
            .map_err(|e| CheckpointError::Layout(e.to_string()))?;
        let theta = fill(skeleton.classifier.params(), &self.theta)?;
        let phi = fill(skeleton.text.params(), &self.phi)?;
        let layout = |e: crate::numerics::NumericsError| CheckpointError::Layout(e.to_string());
        Ok(KwsModel {
            classifier: skeleton.classifier.with_params(theta).map_err(layout)?,
            text: skeleton.text.with_params(phi).map_err(layout)?,
        })
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (prefix, store) in [("theta", &self.theta), ("phi", &self.phi)] {
            out.extend(store.iter().map(|(n, t)| (format!("{prefix}/{n}"), t)));
        }
        if let Some((ot, op)) = &self.optimizers {
            for (group, opt, store) in [("theta", ot, &self.theta), ("phi", op, &self.phi)] {
                for (slot, tensors) in [("m", &opt.m), ("v", &opt.v)] {
                    out.extend(store.iter().zip(tensors).map(|((n, _), t)| (format!("adam.{group}.{slot}/{n}"), t)));
                }
            }
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let named = self.named_tensors();
        let mut offset = 0u64;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            classifier_config: self.classifier_config,
            train_config: self.train_config.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            epoch: self.epoch,
            rng: self.rng.clone(),
            optimizers: self.optimizers.as_ref().map(|(a, b)| (meta(a), meta(b))),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(offset as usize);
        for (_, t) in &named {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: "<stream>".into(),
            source,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 30 {
            return Err(CheckpointError::Header(format!("header length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        if let Some(rng) = &header.rng {
            rng.validate()?;
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(io)?;
        let mut by_name = std::collections::BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(4 * n)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| CheckpointError::Header(format!("tensor {} runs past the payload", e.name)))?;
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Header(err.to_string()))?;
            by_name.insert(e.name.clone(), t);
        }
        let skeleton = KwsModel::<f32>::new(header.classifier_config, header.vocab.clone(), 0)
            .map_err(|e| CheckpointError::Layout(e.to_string()))?;
        let take_store = |prefix: &str, like: &ParamStore<f32>| -> Result<ParamStore<f32>, CheckpointError> {
            let mut store = like.clone();
            for id in like.ids() {
                let key = format!("{prefix}/{}", like.name(id));
                let t = by_name
                    .get(&key)
                    .ok_or_else(|| CheckpointError::Layout(format!("missing tensor {key}")))?;
                if t.shape() != like.get(id).shape() {
                    return Err(CheckpointError::Layout(format!("{key} has shape {:?}", t.shape())));
                }
                *store.get_mut(id) = t.clone();
            }
            Ok(store)
        };
        let theta = take_store("theta", skeleton.classifier.params())?;
        let phi = take_store("phi", skeleton.text.params())?;
        let optimizers = match header.optimizers {
            None => None,
            Some((mt, mp)) => {
                let build = |m: OptimizerMeta, group: &str, store: &ParamStore<f32>| -> Result<Optimizer<f32>, CheckpointError> {
                    let slot = |s: &str| -> Result<Vec<Tensor<f32>>, CheckpointError> {
                        Ok(take_store(&format!("adam.{group}.{s}"), store)?.tensors().to_vec())
                    };
                    Ok(Optimizer {
                        kind: m.kind,
                        lr: m.lr,
                        beta1: m.beta1,
                        beta2: m.beta2,
                        eps: m.eps,
                        step: m.step,
                        m: slot("m")?,
                        v: slot("v")?,
                    })
                };
                Some((build(mt, "theta", &theta)?, build(mp, "phi", &phi)?))
            }
        };
        Ok(Self {
            classifier_config: header.classifier_config,
            train_config: header.train_config,
            vocab: header.vocab,
            theta,
            phi,
            optimizers,
            rng: header.rng,
            step: header.step,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(err)?;
        fs::write(path, buf).map_err(err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(&bytes[..])
    }
}

/// Copies `values` into the layout of `like`, matching by name.
fn fill(like: &ParamStore<f32>, values: &ParamStore<f32>) -> Result<ParamStore<f32>, CheckpointError> {
    let mut out = like.clone();
    for id in like.ids() {
        let name = like.name(id);
        let src = values
            .find(name)
            .map(|v| values.get(v))
            .ok_or_else(|| CheckpointError::Layout(format!("missing tensor {name}")))?;
        if src.shape() != like.get(id).shape() {
            return Err(CheckpointError::Layout(format!("{name} has shape {:?}", src.shape())));
        }
        *out.get_mut(id) = src.clone();
    }
    Ok(out)
}
