//! Character-level LSTM that turns a keyword into per-layer AdaIN gain/bias
//! vectors and a keyword embedding used for nearest-keyword mining.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Scalar, Tensor, Var};
use crate::params::{normal, uniform, Binding, ParamId, ParamStore};

pub const EMBED_DIM: usize = 64;
pub const HIDDEN_DIM: usize = 256;
pub const LSTM_LAYERS: usize = 4;
pub const MAX_KEYWORD_CHARS: usize = 64;
const STACKED_INPUT_GAIN: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TextError {
    #[error("keyword is empty")]
    EmptyKeyword,
    #[error("keyword has {0} characters; at most 64 are allowed")]
    TooLong(usize),
    #[error("invalid alphabet: {0}")]
    InvalidAlphabet(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Character inventory. Alphabet entries map to `0..n`, then UNK = `n`, PAD = `n + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<char>", into = "Vec<char>")]
pub struct CharVocab {
    alphabet: Vec<char>,
    index: HashMap<char, usize>,
}

impl TryFrom<Vec<char>> for CharVocab {
    type Error = TextError;

    fn try_from(alphabet: Vec<char>) -> Result<Self, TextError> {
        Self::new(alphabet)
    }
}

impl From<CharVocab> for Vec<char> {
    fn from(v: CharVocab) -> Self {
        v.alphabet
    }
}

impl Default for CharVocab {
    /// a–z, 0–9, space, apostrophe, hyphen.
    fn default() -> Self {
        let alphabet = ('a'..='z').chain('0'..='9').chain([' ', '\'', '-']).collect();
        Self::new(alphabet).expect("default alphabet is valid")
    }
}

impl CharVocab {
    pub fn new(alphabet: Vec<char>) -> Result<Self, TextError> {
        let mut index = HashMap::new();
        for (i, &c) in alphabet.iter().enumerate() {
            if c.to_lowercase().ne(std::iter::once(c)) {
                return Err(TextError::InvalidAlphabet(format!("{c:?} is not lowercase")));
            }
            if index.insert(c, i).is_some() {
                return Err(TextError::InvalidAlphabet(format!("duplicate {c:?}")));
            }
        }
        if alphabet.is_empty() {
            return Err(TextError::InvalidAlphabet("empty".into()));
        }
        Ok(Self { alphabet, index })
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn unk(&self) -> usize {
        self.alphabet.len()
    }

    pub fn pad(&self) -> usize {
        self.alphabet.len() + 1
    }

    /// Embedding table rows: alphabet plus UNK and PAD.
    pub fn size(&self) -> usize {
        self.alphabet.len() + 2
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    /// Trimmed, lowercased, one index per character; unknown characters map to UNK.
    pub fn tokenize(&self, keyword: &str) -> Result<Vec<usize>, TextError> {
        let normalized = normalize_keyword(keyword);
        if normalized.is_empty() {
            return Err(TextError::EmptyKeyword);
        }
        let n = normalized.chars().count();
        if n > MAX_KEYWORD_CHARS {
            return Err(TextError::TooLong(n));
        }
        Ok(normalized
            .chars()
            .map(|c| self.index.get(&c).copied().unwrap_or(self.unk()))
            .collect())
    }
}

pub fn normalize_keyword(keyword: &str) -> String {
    keyword.trim().to_lowercase()
}

/// Per-AdaIN-layer gain and bias vectors for one keyword.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordNormParams<F> {
    pub gains: Vec<Tensor<F>>,
    pub biases: Vec<Tensor<F>>,
}

impl<F: Scalar> KeywordNormParams<F> {
    pub fn n_layers(&self) -> usize {
        self.gains.len()
    }

    pub fn cast<G: Scalar>(&self) -> KeywordNormParams<G> {
        KeywordNormParams {
            gains: self.gains.iter().map(Tensor::cast).collect(),
            biases: self.biases.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.gains.iter().chain(&self.biases).all(Tensor::all_finite)
    }
}

/// Terminal top-layer hidden state of the LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordEmbedding<F> {
    pub keyword: String,
    pub vector: Vec<F>,
}

#[derive(Clone, Debug)]
struct LstmLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct NormHead {
    w_gain: ParamId,
    b_gain: ParamId,
    w_bias: ParamId,
    b_bias: ParamId,
}

/// Graph handles produced by [`TextEncoder::record`] for `K` keywords.
#[derive(Clone, Debug)]
pub struct EncodedKeywords {
    /// `K × 256`
    pub embedding: Var,
    /// One `K × d_model` matrix per AdaIN layer.
    pub gains: Vec<Var>,
    pub biases: Vec<Var>,
}

/// The text encoder `h(v; φ)`.
#[derive(Clone, Debug)]
pub struct TextEncoder<F> {
    vocab: CharVocab,
    d_model: usize,
    params: ParamStore<F>,
    embedding: ParamId,
    layers: Vec<LstmLayer>,
    heads: Vec<NormHead>,
}

impl<F: Scalar> TextEncoder<F> {
    /// LSTM weights ~ U(±1/√256), except the input weights of stacked layers,
    /// which use U(±4/√256) so character identity survives to the top layer.
    /// Head weights ~ N(0, 0.01²); gain-head bias 1, bias-head bias 0.
    pub fn new(vocab: CharVocab, d_model: usize, n_adain: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::default();
        let embedding = params.add("text.embedding", normal(rng, &[vocab.size(), EMBED_DIM], 1.0));
        let bound = 1.0 / (HIDDEN_DIM as f64).sqrt();
        let layers = (0..LSTM_LAYERS)
            .map(|l| {
                let (input, in_bound) = if l == 0 { (EMBED_DIM, bound) } else { (HIDDEN_DIM, STACKED_INPUT_GAIN * bound) };
                LstmLayer {
                    w_ih: params.add(format!("text.lstm{l}.w_ih"), uniform(rng, &[input, 4 * HIDDEN_DIM], in_bound)),
                    w_hh: params.add(format!("text.lstm{l}.w_hh"), uniform(rng, &[HIDDEN_DIM, 4 * HIDDEN_DIM], bound)),
                    bias: params.add(format!("text.lstm{l}.bias"), uniform(rng, &[4 * HIDDEN_DIM], bound)),
                }
            })
            .collect();
        let heads = (0..n_adain)
            .map(|l| NormHead {
                w_gain: params.add(format!("text.head{l}.w_gain"), normal(rng, &[HIDDEN_DIM, d_model], 0.01)),
                b_gain: params.add(format!("text.head{l}.b_gain"), Tensor::ones(&[d_model])),
                w_bias: params.add(format!("text.head{l}.w_bias"), normal(rng, &[HIDDEN_DIM, d_model], 0.01)),
                b_bias: params.add(format!("text.head{l}.b_bias"), Tensor::zeros(&[d_model])),
            })
            .collect();
        Self {
            vocab,
            d_model,
            params,
            embedding,
            layers,
            heads,
        }
    }

    pub fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn n_adain(&self) -> usize {
        self.heads.len()
    }

    pub fn n_lstm_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Replaces parameter values; the layout must match.
    pub fn with_params(mut self, params: ParamStore<F>) -> Result<Self, NumericsError> {
        check_same_layout(&self.params, &params)?;
        self.params = params;
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> TextEncoder<G> {
        TextEncoder {
            vocab: self.vocab.clone(),
            d_model: self.d_model,
            params: self.params.cast(),
            embedding: self.embedding,
            layers: self.layers.clone(),
            heads: self.heads.clone(),
        }
    }

    /// Records the encoder for a batch of tokenized keywords.
    ///
    /// Shorter sequences are padded; a 0/1 mask carries their state through
    /// the padded steps unchanged, so each row equals its unbatched value.
    pub fn record(&self, g: &mut Graph<F>, bound: &Binding, tokens: &[Vec<usize>]) -> Result<EncodedKeywords, NumericsError> {
        let k = tokens.len();
        let max_len = tokens.iter().map(Vec::len).max().unwrap_or(0);
        if k == 0 || max_len == 0 {
            return Err(NumericsError::ShapeMismatch("no keywords to encode".into()));
        }
        let zeros = Tensor::zeros(&[k, HIDDEN_DIM]);
        let mut h: Vec<Var> = (0..LSTM_LAYERS).map(|_| g.constant(zeros.clone())).collect();
        let mut c: Vec<Var> = h.clone();
        for t in 0..max_len {
            let ids: Vec<usize> = tokens.iter().map(|s| s.get(t).copied().unwrap_or(self.vocab.pad())).collect();
            let masks = if tokens.iter().all(|s| s.len() > t) {
                None
            } else {
                let mut keep = Vec::with_capacity(k * HIDDEN_DIM);
                for s in tokens {
                    let v = if s.len() > t { F::one() } else { F::zero() };
                    keep.extend(std::iter::repeat_n(v, HIDDEN_DIM));
                }
                let keep = Tensor::new(vec![k, HIDDEN_DIM], keep)?;
                let carry = keep.map(|v| F::one() - v);
                Some((g.constant(keep), g.constant(carry)))
            };
            let mut x = g.gather(bound.var(self.embedding), &ids)?;
            for (l, layer) in self.layers.iter().enumerate() {
                let (h_new, c_new) = self.cell(g, bound, layer, x, h[l], c[l])?;
                match masks {
                    None => {
                        h[l] = h_new;
                        c[l] = c_new;
                    }
                    Some((keep, carry)) => {
                        h[l] = blend(g, keep, carry, h_new, h[l])?;
                        c[l] = blend(g, keep, carry, c_new, c[l])?;
                    }
                }
                x = h[l];
            }
        }
        let top = h[LSTM_LAYERS - 1];
        let mut gains = Vec::with_capacity(self.heads.len());
        let mut biases = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let gain = g.matmul(top, bound.var(head.w_gain))?;
            gains.push(g.add(gain, bound.var(head.b_gain))?);
            let bias = g.matmul(top, bound.var(head.w_bias))?;
            biases.push(g.add(bias, bound.var(head.b_bias))?);
        }
        Ok(EncodedKeywords {
            embedding: top,
            gains,
            biases,
        })
    }

    fn cell(&self, g: &mut Graph<F>, bound: &Binding, layer: &LstmLayer, x: Var, h: Var, c: Var) -> Result<(Var, Var), NumericsError> {
        let xi = g.matmul(x, bound.var(layer.w_ih))?;
        let hh = g.matmul(h, bound.var(layer.w_hh))?;
        let z = g.add(xi, hh)?;
        let z = g.add(z, bound.var(layer.bias))?;
        let gate = |g: &mut Graph<F>, i: usize| g.slice(z, 1, i * HIDDEN_DIM, (i + 1) * HIDDEN_DIM);
        let input = gate(g, 0)?;
        let input = g.sigmoid(input)?;
        let forget = gate(g, 1)?;
        let forget = g.sigmoid(forget)?;
        let cand = gate(g, 2)?;
        let cand = g.tanh(cand)?;
        let output = gate(g, 3)?;
        let output = g.sigmoid(output)?;
        let keep = g.mul(forget, c)?;
        let write = g.mul(input, cand)?;
        let c_new = g.add(keep, write)?;
        let squashed = g.tanh(c_new)?;
        let h_new = g.mul(output, squashed)?;
        Ok((h_new, c_new))
    }

    pub fn tokenize_all(&self, keywords: &[&str]) -> Result<Vec<Vec<usize>>, TextError> {
        keywords.iter().map(|k| self.vocab.tokenize(k)).collect()
    }

    /// Encodes several keywords in one batched pass.
    pub fn encode_batch(&self, keywords: &[&str]) -> Result<Vec<(KeywordNormParams<F>, KeywordEmbedding<F>)>, TextError> {
        let tokens = self.tokenize_all(keywords)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let enc = self.record(&mut g, &bound, &tokens)?;
        Ok(split_encoded(&g, &enc, keywords))
    }

    /// `h(v; φ)`: the keyword's normalization parameters and its embedding.
    pub fn encode_keyword(&self, keyword: &str) -> Result<(KeywordNormParams<F>, KeywordEmbedding<F>), TextError> {
        Ok(self.encode_batch(&[keyword])?.remove(0))
    }
}

fn blend<F: Scalar>(g: &mut Graph<F>, keep: Var, carry: Var, new: Var, old: Var) -> Result<Var, NumericsError> {
    let a = g.mul(keep, new)?;
    let b = g.mul(carry, old)?;
    g.add(a, b)
}

/// Splits batched encoder outputs into per-keyword values.
pub fn split_encoded<F: Scalar>(g: &Graph<F>, enc: &EncodedKeywords, keywords: &[&str]) -> Vec<(KeywordNormParams<F>, KeywordEmbedding<F>)> {
    let row = |v: Var, k: usize| Tensor::vector(g.value(v).row(k).to_vec());
    keywords
        .iter()
        .enumerate()
        .map(|(k, kw)| {
            let params = KeywordNormParams {
                gains: enc.gains.iter().map(|&v| row(v, k)).collect(),
                biases: enc.biases.iter().map(|&v| row(v, k)).collect(),
            };
            let embedding = KeywordEmbedding {
                keyword: normalize_keyword(kw),
                vector: g.value(enc.embedding).row(k).to_vec(),
            };
            (params, embedding)
        })
        .collect()
}

pub(crate) fn check_same_layout<F: Scalar>(a: &ParamStore<F>, b: &ParamStore<F>) -> Result<(), NumericsError> {
    let same = a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape());
    if same {
        Ok(())
    } else {
        Err(NumericsError::ShapeMismatch("parameter layout differs".into()))
    }
}
