//! Keyword registry: `θ_v` is a function of the keyword alone, so it is
//! computed once per keyword and reused across utterances, while the audio
//! encoder runs once per utterance regardless of how many keywords are scored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{bind_norms, AudioClassifier, ClassifierError};
use crate::numerics::{Graph, Scalar, Tensor};
use crate::params::ParamStore;
use crate::text_encoder::{normalize_keyword, KeywordNormParams, TextEncoder, TextError};

pub const REGISTRY_FILE: &str = "registry.json";
const REGISTRY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("no keywords registered")]
    EmptyRegistry,
    #[error("registry layout ({d_model} channels, {n_adain} AdaIN layers) does not match the classifier")]
    LayoutMismatch { d_model: usize, n_adain: usize },
    #[error("malformed registry file {path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

/// Cached output of the text encoder for one keyword.
#[derive(Clone, Debug, PartialEq)]
pub struct RegistryEntry<F> {
    pub norms: KeywordNormParams<F>,
    pub embedding: Vec<F>,
}

/// Keyword → `(θ_v, e(v))`, always consistent with the encoder snapshot it holds.
#[derive(Clone, Debug)]
pub struct KeywordRegistry<F> {
    text: TextEncoder<F>,
    fingerprint: u64,
    entries: BTreeMap<String, RegistryEntry<F>>,
    encode_calls: usize,
}

impl<F: Scalar> KeywordRegistry<F> {
    /// Empty registry over a snapshot of `text`.
    pub fn new(text: TextEncoder<F>) -> Self {
        Self {
            fingerprint: fingerprint(text.params()),
            text,
            entries: BTreeMap::new(),
            encode_calls: 0,
        }
    }

    /// Hash of the encoder parameters the entries were computed with.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn text_encoder(&self) -> &TextEncoder<F> {
        &self.text
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keywords(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, keyword: &str) -> Option<&RegistryEntry<F>> {
        self.entries.get(&normalize_keyword(keyword))
    }

    /// Number of text-encoder passes this registry has run.
    pub fn encode_calls(&self) -> usize {
        self.encode_calls
    }

    /// Encodes and caches `keyword`; a no-op when it is already present.
    pub fn register(&mut self, keyword: &str) -> Result<&RegistryEntry<F>, InferenceError> {
        let key = normalize_keyword(keyword);
        if !self.entries.contains_key(&key) {
            let entry = self.encode(&key)?;
            self.entries.insert(key.clone(), entry);
        }
        Ok(&self.entries[&key])
    }

    pub fn register_all<S: AsRef<str>>(&mut self, keywords: &[S]) -> Result<(), InferenceError> {
        for k in keywords {
            self.register(k.as_ref())?;
        }
        Ok(())
    }

    /// Swaps in a new encoder. If its parameters differ from the snapshot,
    /// every cached keyword is re-encoded. Returns whether a rebuild happened.
    pub fn rebuild(&mut self, text: TextEncoder<F>) -> Result<bool, InferenceError> {
        let fp = fingerprint(text.params());
        if fp == self.fingerprint && text.vocab() == self.text.vocab() {
            return Ok(false);
        }
        let keywords: Vec<String> = self.entries.keys().cloned().collect();
        self.text = text;
        self.fingerprint = fp;
        self.entries.clear();
        for k in keywords {
            let entry = self.encode(&k)?;
            self.entries.insert(k, entry);
        }
        Ok(true)
    }

    fn encode(&mut self, keyword: &str) -> Result<RegistryEntry<F>, InferenceError> {
        self.encode_calls += 1;
        let (norms, embedding) = self.text.encode_keyword(keyword)?;
        Ok(RegistryEntry {
            norms,
            embedding: embedding.vector,
        })
    }

    fn check_layout(&self, classifier: &AudioClassifier<F>) -> Result<(), InferenceError> {
        let cfg = classifier.config();
        if cfg.d_model != self.text.d_model() || cfg.n_adain() != self.text.n_adain() {
            return Err(InferenceError::LayoutMismatch {
                d_model: self.text.d_model(),
                n_adain: self.text.n_adain(),
            });
        }
        Ok(())
    }

    /// `P(v | x)` for every registered keyword from one audio-encoder pass.
    ///
    /// Each value is bit-identical to `classifier.forward_one(features, θ_v)`.
    pub fn score_all(&self, classifier: &AudioClassifier<F>, features: &Tensor<F>) -> Result<BTreeMap<String, F>, InferenceError> {
        if self.entries.is_empty() {
            return Err(InferenceError::EmptyRegistry);
        }
        self.check_layout(classifier)?;
        let encoded = {
            let mut g = Graph::new();
            let bound = classifier.params().bind(&mut g, false);
            let x = g.constant(features.clone());
            let z = classifier.record_encoder(&mut g, &bound, x)?;
            g.value(z).clone()
        };
        self.entries
            .par_iter()
            .map(|(k, e)| {
                classifier.validate_norms(&e.norms)?;
                let mut g = Graph::new();
                let bound = classifier.params().bind(&mut g, false);
                let z = g.constant(encoded.clone());
                let norms = bind_norms(&mut g, &e.norms, false);
                let logit = classifier.record_head(&mut g, &bound, z, &norms).map_err(InferenceError::from)?;
                let prob = g.sigmoid(logit).map_err(ClassifierError::from)?;
                Ok((k.clone(), g.value(prob).data()[0]))
            })
            .collect()
    }

    /// Writes the cached entries as JSON.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), InferenceError> {
        let path = path.as_ref();
        let file = RegistryFile {
            version: REGISTRY_VERSION,
            fingerprint: format!("{:016x}", self.fingerprint),
            d_model: self.text.d_model(),
            n_adain: self.text.n_adain(),
            entries: self
                .entries
                .iter()
                .map(|(k, e)| StoredEntry {
                    keyword: k.clone(),
                    gains: e.norms.gains.iter().map(to_f64).collect(),
                    biases: e.norms.biases.iter().map(to_f64).collect(),
                    embedding: e.embedding.iter().map(|v| v.to_f64_lossy()).collect(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&file).expect("registry serializes");
        fs::write(path, json).map_err(|source| InferenceError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Reads a saved registry for use with `text`. Entries are trusted when
    /// the stored fingerprint matches; otherwise the keywords are re-encoded.
    pub fn load(path: impl AsRef<Path>, text: TextEncoder<F>) -> Result<Self, InferenceError> {
        let path = path.as_ref();
        let bad = |message: String| InferenceError::Format {
            path: path.display().to_string(),
            message,
        };
        let raw = fs::read_to_string(path).map_err(|source| InferenceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: RegistryFile = serde_json::from_str(&raw).map_err(|e| bad(e.to_string()))?;
        if file.version != REGISTRY_VERSION {
            return Err(bad(format!("unsupported version {}", file.version)));
        }
        let mut registry = Self::new(text);
        if format!("{:016x}", registry.fingerprint) != file.fingerprint {
            log::warn!("{}: text encoder changed since the registry was saved; re-encoding", path.display());
            let keywords: Vec<&str> = file.entries.iter().map(|e| e.keyword.as_str()).collect();
            registry.register_all(&keywords)?;
            return Ok(registry);
        }
        let d = registry.text.d_model();
        if file.d_model != d || file.n_adain != registry.text.n_adain() {
            return Err(bad("layout does not match the text encoder".into()));
        }
        for e in file.entries {
            let ok = e.gains.len() == file.n_adain
                && e.biases.len() == file.n_adain
                && e.gains.iter().chain(&e.biases).all(|v| v.len() == d);
            if !ok {
                return Err(bad(format!("entry {:?} has the wrong shape", e.keyword)));
            }
            let from = |v: &Vec<f64>| Tensor::vector(v.iter().map(|&x| F::from_f64_lossy(x)).collect());
            let entry = RegistryEntry {
                norms: KeywordNormParams {
                    gains: e.gains.iter().map(from).collect(),
                    biases: e.biases.iter().map(from).collect(),
                },
                embedding: e.embedding.iter().map(|&x| F::from_f64_lossy(x)).collect(),
            };
            registry.entries.insert(normalize_keyword(&e.keyword), entry);
        }
        Ok(registry)
    }
}

/// Baseline without caching: encode the keyword, then run the full classifier.
pub fn score_uncached<F: Scalar>(text: &TextEncoder<F>, classifier: &AudioClassifier<F>, features: &Tensor<F>, keyword: &str) -> Result<F, InferenceError> {
    let (norms, _) = text.encode_keyword(keyword)?;
    Ok(classifier.forward_one(features, &norms)?)
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    version: u32,
    fingerprint: String,
    d_model: usize,
    n_adain: usize,
    entries: Vec<StoredEntry>,
}

#[derive(Serialize, Deserialize)]
struct StoredEntry {
    keyword: String,
    gains: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    embedding: Vec<f64>,
}

fn to_f64<F: Scalar>(t: &Tensor<F>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

/// FNV-1a over parameter names, shapes and value bits.
pub fn fingerprint<F: Scalar>(params: &ParamStore<F>) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    };
    for (name, t) in params.iter() {
        eat(name.as_bytes());
        for &s in t.shape() {
            eat(&(s as u64).to_le_bytes());
        }
        for v in t.data() {
            eat(&v.to_f64_lossy().to_bits().to_le_bytes());
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::params::uniform;
    use crate::training::KwsModel;
    use crate::text_encoder::CharVocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> KwsModel<f32> {
        KwsModel::new(ClassifierConfig::toy(), CharVocab::default(), 4).unwrap()
    }

    fn features(seed: u64, t: usize) -> Tensor<f32> {
        uniform(&mut ChaCha8Rng::seed_from_u64(seed), &[t, 4], 2.0)
    }

    #[test]
    fn registering_twice_encodes_once() {
        let model = toy();
        let mut reg = KeywordRegistry::new(model.text.clone());
        let first = reg.register("alpha").unwrap().clone();
        assert_eq!(reg.encode_calls(), 1);
        assert_eq!(reg.register(" Alpha ").unwrap(), &first);
        assert_eq!((reg.len(), reg.encode_calls()), (1, 1));
    }

    #[test]
    fn hundred_registrations_hundred_encodes() {
        let mut reg = KeywordRegistry::new(toy().text);
        let words: Vec<String> = (0..100).map(|i| format!("kw{i:03}")).collect();
        reg.register_all(&words).unwrap();
        reg.register_all(&words).unwrap();
        assert_eq!((reg.len(), reg.encode_calls()), (100, 100));
    }

    #[test]
    fn errors() {
        let model = toy();
        let mut reg = KeywordRegistry::new(model.text.clone());
        assert!(matches!(reg.score_all(&model.classifier, &features(0, 12)), Err(InferenceError::EmptyRegistry)));
        assert!(matches!(reg.register("   "), Err(InferenceError::Text(TextError::EmptyKeyword))));
        assert!(reg.is_empty());
        reg.register("abc").unwrap();
        let other = KwsModel::<f32>::new(ClassifierConfig { d_model: 12, n_heads: 2, ..ClassifierConfig::toy() }, CharVocab::default(), 4).unwrap();
        assert!(matches!(
            reg.score_all(&other.classifier, &features(0, 12)),
            Err(InferenceError::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn cached_scores_match_uncached_bitwise() {
        let model = toy();
        let mut reg = KeywordRegistry::new(model.text.clone());
        let words = ["zeta", "alpha", "mu", "alphabet", "kappa"];
        reg.register_all(&words).unwrap();
        for seed in 0..4 {
            let x = features(seed, 10 + seed as usize * 3);
            model.classifier.reset_encoder_calls();
            let scores = reg.score_all(&model.classifier, &x).unwrap();
            assert_eq!(model.classifier.encoder_calls(), 1);
            assert_eq!(scores.len(), words.len());
            for w in words {
                let direct = score_uncached(&model.text, &model.classifier, &x, w).unwrap();
                assert_eq!(scores[w].to_bits(), direct.to_bits(), "{w}");
            }
        }
    }

    #[test]
    fn results_independent_of_registration_order_and_company() {
        let model = toy();
        let x = features(9, 14);
        let mut a = KeywordRegistry::new(model.text.clone());
        a.register_all(&["one", "two", "three"]).unwrap();
        let mut b = KeywordRegistry::new(model.text.clone());
        b.register_all(&["three", "seven", "one", "two"]).unwrap();
        let mut c = KeywordRegistry::new(model.text.clone());
        c.register("two").unwrap();
        let (sa, sb, sc) = (
            a.score_all(&model.classifier, &x).unwrap(),
            b.score_all(&model.classifier, &x).unwrap(),
            c.score_all(&model.classifier, &x).unwrap(),
        );
        for w in ["one", "two", "three"] {
            assert_eq!(sa[w], sb[w]);
        }
        assert_eq!(sc["two"], sa["two"]);
    }

    #[test]
    fn changed_encoder_triggers_rebuild() {
        let model = toy();
        let mut reg = KeywordRegistry::new(model.text.clone());
        reg.register_all(&["red", "green"]).unwrap();
        assert!(!reg.rebuild(model.text.clone()).unwrap());
        assert_eq!(reg.encode_calls(), 2);

        let mut changed = model.text.clone();
        for v in changed.params_mut().tensors_mut()[0].data_mut() {
            *v += 0.5;
        }
        let before = reg.get("red").unwrap().clone();
        assert!(reg.rebuild(changed.clone()).unwrap());
        assert_eq!(reg.encode_calls(), 4);
        assert_eq!(reg.fingerprint(), fingerprint(changed.params()));
        let fresh = changed.encode_keyword("red").unwrap().0;
        assert_eq!(reg.get("red").unwrap().norms, fresh);
        assert_ne!(reg.get("red").unwrap(), &before);
    }

    #[test]
    fn save_and_load_round_trip() {
        let model = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(REGISTRY_FILE);
        let mut reg = KeywordRegistry::new(model.text.clone());
        reg.register_all(&["north", "south", "east"]).unwrap();
        reg.save(&path).unwrap();

        let loaded = KeywordRegistry::load(&path, model.text.clone()).unwrap();
        assert_eq!(loaded.encode_calls(), 0);
        assert_eq!(loaded.keywords().collect::<Vec<_>>(), reg.keywords().collect::<Vec<_>>());
        for k in reg.keywords() {
            assert_eq!(loaded.get(k), reg.get(k));
        }
        let x = features(3, 11);
        assert_eq!(
            loaded.score_all(&model.classifier, &x).unwrap(),
            reg.score_all(&model.classifier, &x).unwrap()
        );

        let mut changed = model.text.clone();
        changed.params_mut().tensors_mut()[1].data_mut()[0] += 0.25;
        let reencoded = KeywordRegistry::load(&path, changed).unwrap();
        assert_eq!((reencoded.len(), reencoded.encode_calls()), (3, 3));

        fs::write(&path, "{not json").unwrap();
        assert!(matches!(KeywordRegistry::load(&path, model.text.clone()), Err(InferenceError::Format { .. })));
    }
}
