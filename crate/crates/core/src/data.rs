//! Corpus ingestion, the synthetic speech generator, and batch assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierError, PaddedBatchFeatures};
use crate::frontend::{compute_log_mel, AudioBuffer, FrontendError, MelSpectrogram, N_MELS};
use crate::negatives::{
    make_training_pair, negative_for, nearest_keyword, random_negative, KeywordVocab, NegativeConfig, NegativeError,
    NegativeStrategy, PendingNegative, StrategyMix, Transcript,
};

/// Name of the generator behind every seeded stream in this crate.
pub const RNG_ALGORITHM: &str = "chacha8";
pub const SYNTH_SPEC_FILE: &str = "synth_spec.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("audio file {0} does not exist")]
    MissingAudioFile(PathBuf),
    #[error("character {0:?} has no synthesis template")]
    UnknownCharacter(char),
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("need at least {needed} source utterances, have {available}")]
    NotEnoughExamples { needed: usize, available: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Negative(#[from] NegativeError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error("{0}")]
    Other(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where an utterance's features come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AudioRef {
    /// WAV (16 kHz mono) or MELF feature file.
    File(PathBuf),
    /// Regenerated from the corpus' synthesis spec with utterance stream `id`.
    Synthetic(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub audio: AudioRef,
    pub transcript: Transcript,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WordsField {
    List(Vec<String>),
    Text(String),
}

#[derive(Deserialize)]
struct ManifestLine {
    id: Option<String>,
    audio: String,
    transcript: WordsField,
    lang: String,
}

/// Serialized form of one manifest line.
#[derive(Serialize)]
struct ManifestLineOut<'a> {
    id: &'a str,
    audio: String,
    transcript: &'a [String],
    lang: &'a str,
}

/// Reads a JSONL manifest. Relative audio paths resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let raw: ManifestLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let words = match raw.transcript {
            WordsField::List(w) => w,
            WordsField::Text(t) => t.split_whitespace().map(String::from).collect(),
        };
        let transcript = Transcript::new(&words, raw.lang).map_err(|e| parse_err(e.to_string()))?;
        let audio = match raw.audio.strip_prefix("synthetic:") {
            Some(id) => AudioRef::Synthetic(id.parse().map_err(|_| parse_err(format!("bad synthetic id {id:?}")))?),
            None => {
                let p = base.join(&raw.audio);
                if !p.is_file() {
                    return Err(DataError::MissingAudioFile(p));
                }
                AudioRef::File(p)
            }
        };
        entries.push(ManifestEntry {
            id: raw.id.unwrap_or_else(|| format!("line{}", i + 1)),
            audio,
            transcript,
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = String::new();
    for e in entries {
        let audio = match &e.audio {
            AudioRef::Synthetic(id) => format!("synthetic:{id}"),
            AudioRef::File(p) => p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned(),
        };
        let line = ManifestLineOut {
            id: &e.id,
            audio,
            transcript: e.transcript.words(),
            lang: e.transcript.lang(),
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub rng: String,
    pub chars_per_template: usize,
    pub template_noise_std: f64,
    pub gap_min: usize,
    pub gap_max: usize,
    pub feature_dim: usize,
    pub alphabet: String,
    pub vocab_size: usize,
    pub word_len_min: usize,
    pub word_len_max: usize,
    pub words_min: usize,
    pub words_max: usize,
    pub lang: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            rng: RNG_ALGORITHM.into(),
            chars_per_template: 6,
            template_noise_std: 0.3,
            gap_min: 2,
            gap_max: 6,
            feature_dim: N_MELS,
            alphabet: "abcdefghijklmnopqrstuvwxyz".into(),
            vocab_size: 60,
            word_len_min: 3,
            word_len_max: 8,
            words_min: 3,
            words_max: 6,
            lang: "syn".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.into()));
        if self.rng != RNG_ALGORITHM {
            return bad("only the chacha8 generator is supported");
        }
        if self.chars_per_template == 0 || self.feature_dim == 0 {
            return bad("template size must be positive");
        }
        if !(self.template_noise_std >= 0.0 && self.template_noise_std.is_finite()) {
            return bad("template_noise_std must be finite and non-negative");
        }
        if self.gap_min > self.gap_max || self.word_len_min == 0 || self.word_len_min > self.word_len_max {
            return bad("empty gap or word-length range");
        }
        if self.words_min == 0 || self.words_min > self.words_max || self.words_max > self.vocab_size {
            return bad("words per utterance must lie in 1..=vocab_size");
        }
        let alphabet: BTreeSet<char> = self.alphabet.chars().collect();
        if alphabet.len() != self.alphabet.chars().count() || alphabet.is_empty() {
            return bad("alphabet must be non-empty without repeats");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Named seeded streams: templates, vocabulary, then one per utterance.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const TEMPLATE_STREAM: u64 = 0;
const VOCAB_STREAM: u64 = 1;
const UTTERANCE_STREAM_BASE: u64 = 1 << 32;

/// Frame range `[start, end)` of one word.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub features: MelSpectrogram,
    pub spans: Vec<WordSpan>,
}

/// Per-character templates drawn once from the spec's seed.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    spec: SynthSpec,
    templates: BTreeMap<char, Vec<f32>>,
}

impl Synthesizer {
    pub fn new(spec: SynthSpec) -> Result<Self, DataError> {
        spec.validate()?;
        let mut rng = stream(spec.seed, TEMPLATE_STREAM);
        let size = spec.chars_per_template * spec.feature_dim;
        let templates = spec
            .alphabet
            .chars()
            .map(|c| {
                let t: Vec<f32> = (0..size).map(|_| StandardNormal.sample(&mut rng)).collect();
                (c, t)
            })
            .collect();
        Ok(Self { spec, templates })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    /// `k × feature_dim` template of `c`, row-major.
    pub fn template(&self, c: char) -> Option<&[f32]> {
        self.templates.get(&c).map(Vec::as_slice)
    }

    pub fn templates(&self) -> impl Iterator<Item = (char, &[f32])> {
        self.templates.iter().map(|(c, t)| (*c, t.as_slice()))
    }

    /// Words joined by silent gaps, plus white noise over the whole matrix.
    pub fn synthesize(&self, words: &[&str], rng: &mut impl Rng) -> Result<SynthUtterance, DataError> {
        let k = self.spec.chars_per_template;
        let dim = self.spec.feature_dim;
        if words.is_empty() {
            return Err(DataError::InvalidSpec("no words to synthesize".into()));
        }
        let mut data: Vec<f32> = Vec::new();
        let mut spans = Vec::with_capacity(words.len());
        for (i, word) in words.iter().enumerate() {
            if i > 0 {
                let gap = rng.gen_range(self.spec.gap_min..=self.spec.gap_max);
                data.resize(data.len() + gap * dim, 0.0);
            }
            let start = data.len() / dim;
            for c in word.chars() {
                data.extend_from_slice(self.template(c).ok_or(DataError::UnknownCharacter(c))?);
            }
            spans.push(WordSpan {
                word: word.to_string(),
                start,
                end: start + k * word.chars().count(),
            });
        }
        if self.spec.template_noise_std > 0.0 {
            let noise = Normal::new(0.0, self.spec.template_noise_std).expect("valid std");
            for v in &mut data {
                *v += noise.sample(rng) as f32;
            }
        }
        let frames = data.len() / dim;
        Ok(SynthUtterance {
            features: MelSpectrogram::new(data, frames, dim)?,
            spans,
        })
    }

    /// Deterministic utterance for stream `id`.
    pub fn synthesize_id(&self, words: &[&str], id: u64) -> Result<SynthUtterance, DataError> {
        self.synthesize(words, &mut stream(self.spec.seed, UTTERANCE_STREAM_BASE + id))
    }

    /// Distinct random words over the alphabet.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut rng = stream(self.spec.seed, VOCAB_STREAM);
        let alphabet: Vec<char> = self.spec.alphabet.chars().collect();
        let mut seen = BTreeSet::new();
        let mut words = Vec::with_capacity(self.spec.vocab_size);
        while words.len() < self.spec.vocab_size {
            let len = rng.gen_range(self.spec.word_len_min..=self.spec.word_len_max);
            let w: String = (0..len).map(|_| *alphabet.choose(&mut rng).expect("non-empty")).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        words
    }

    /// Transcript for stream `id`: distinct vocabulary words.
    pub fn transcript_words(&self, vocab: &[String], id: u64) -> Vec<String> {
        let mut rng = stream(self.spec.seed, UTTERANCE_STREAM_BASE + id);
        // separate draw so the utterance stream itself stays untouched
        rng.set_word_pos(1 << 40);
        let n = rng.gen_range(self.spec.words_min..=self.spec.words_max);
        vocab.choose_multiple(&mut rng, n).cloned().collect()
    }
}

/// `synthesize_utterance` with a fresh synthesizer; prefer [`Synthesizer`] for many calls.
pub fn synthesize_utterance(words: &[&str], spec: &SynthSpec, id: u64) -> Result<SynthUtterance, DataError> {
    Synthesizer::new(spec.clone())?.synthesize_id(words, id)
}

/// One utterance with its features in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: MelSpectrogram,
    pub transcript: Transcript,
    pub spans: Option<Vec<WordSpan>>,
}

/// Reads every entry's features, synthesizing `synthetic:` markers from the
/// corpus' `synth_spec.json` next to the manifest.
pub fn load_examples(manifest: impl AsRef<Path>) -> Result<Vec<Example>, DataError> {
    let manifest = manifest.as_ref();
    let entries = load_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let synth = if entries.iter().any(|e| matches!(e.audio, AudioRef::Synthetic(_))) {
        Some(Synthesizer::new(SynthSpec::load(base.join(SYNTH_SPEC_FILE))?)?)
    } else {
        None
    };
    let spans = load_spans(base).unwrap_or_default();
    entries
        .into_par_iter()
        .map(|e| {
            let features = match &e.audio {
                AudioRef::Synthetic(id) => {
                    let words: Vec<&str> = e.transcript.words().iter().map(String::as_str).collect();
                    synth.as_ref().expect("loaded above").synthesize_id(&words, *id)?.features
                }
                AudioRef::File(p) => load_features(p)?,
            };
            Ok(Example {
                spans: spans.get(&e.id).cloned(),
                id: e.id,
                features,
                transcript: e.transcript,
            })
        })
        .collect()
}

/// MELF feature file, or WAV run through the log-Mel frontend.
pub fn load_features(path: &Path) -> Result<MelSpectrogram, DataError> {
    let is_wav = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        Ok(compute_log_mel(&AudioBuffer::from_wav(path)?)?)
    } else {
        Ok(MelSpectrogram::load(path)?)
    }
}

pub const SPANS_FILE: &str = "spans.json";

fn load_spans(dir: &Path) -> Option<BTreeMap<String, Vec<WordSpan>>> {
    let text = fs::read_to_string(dir.join(SPANS_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Files written by [`write_synthetic_corpus`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusPaths {
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
}

/// Materializes a synthetic corpus: MELF features, two manifests, spans, spec, vocabulary.
pub fn write_synthetic_corpus(spec: &SynthSpec, n_train: usize, n_eval: usize, out_dir: &Path) -> Result<CorpusPaths, DataError> {
    let synth = Synthesizer::new(spec.clone())?;
    let vocab = synth.vocabulary();
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(io_err(&feat_dir))?;
    let jobs: Vec<(String, u64)> = (0..n_train)
        .map(|i| (format!("train_{i:05}"), i as u64))
        .chain((0..n_eval).map(|i| (format!("eval_{i:05}"), (n_train + i) as u64)))
        .collect();
    let made: Vec<(ManifestEntry, Vec<WordSpan>)> = jobs
        .into_par_iter()
        .map(|(name, id)| {
            let words = synth.transcript_words(&vocab, id);
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let utt = synth.synthesize_id(&refs, id)?;
            let path = feat_dir.join(format!("{name}.melf"));
            utt.features.save(&path)?;
            let entry = ManifestEntry {
                id: name,
                audio: AudioRef::File(path),
                transcript: Transcript::new(&words, spec.lang.clone())?,
            };
            Ok((entry, utt.spans))
        })
        .collect::<Result<_, DataError>>()?;
    let (train, eval) = made.split_at(n_train);
    let paths = CorpusPaths {
        train_manifest: out_dir.join("train.jsonl"),
        eval_manifest: out_dir.join("eval.jsonl"),
    };
    let entries = |part: &[(ManifestEntry, Vec<WordSpan>)]| part.iter().map(|(e, _)| e.clone()).collect::<Vec<_>>();
    write_manifest(&paths.train_manifest, &entries(train))?;
    write_manifest(&paths.eval_manifest, &entries(eval))?;
    let spans: BTreeMap<&str, &Vec<WordSpan>> = made.iter().map(|(e, s)| (e.id.as_str(), s)).collect();
    write_json(&out_dir.join(SPANS_FILE), &spans)?;
    write_json(&out_dir.join(SYNTH_SPEC_FILE), spec)?;
    write_json(&out_dir.join("vocab.json"), &vocab)?;
    Ok(paths)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DataError::Other(e.to_string()))?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

/// A batch layout before nearest-keyword negatives are resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    /// Index into the example list, one per source utterance.
    pub sources: Vec<usize>,
    pub positives: Vec<String>,
    pub negatives: Vec<PendingNegative>,
    pub strategies: Vec<NegativeStrategy>,
}

impl BatchPlan {
    pub fn needs_embeddings(&self) -> bool {
        self.negatives.iter().any(|n| *n == PendingNegative::NearestInBatch)
    }

    /// Distinct positive keywords, sorted: the in-batch candidate set.
    pub fn batch_keywords(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.positives.iter().collect();
        set.into_iter().cloned().collect()
    }
}

/// Fully labelled batch: the first half positive, the second half negative.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledBatch {
    pub features: PaddedBatchFeatures,
    pub sources: Vec<usize>,
    pub keywords: Vec<String>,
    pub labels: Vec<bool>,
    /// Strategy that produced each negative; `None` for positives.
    pub strategies: Vec<Option<NegativeStrategy>>,
}

impl AssembledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn distinct_keywords(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.keywords.iter().collect();
        set.into_iter().cloned().collect()
    }
}

/// Draws one positive and one (possibly pending) negative per source.
pub fn plan_batch(
    examples: &[Example],
    sources: &[usize],
    vocab: &KeywordVocab,
    cfg: &NegativeConfig,
    rng: &mut impl Rng,
) -> Result<BatchPlan, DataError> {
    let mut plan = BatchPlan {
        sources: sources.to_vec(),
        positives: Vec::with_capacity(sources.len()),
        negatives: Vec::with_capacity(sources.len()),
        strategies: Vec::with_capacity(sources.len()),
    };
    for &s in sources {
        let pair = make_training_pair(&examples[s].transcript, vocab, cfg, rng)?;
        plan.positives.push(pair.positive);
        plan.negatives.push(pair.negative);
        plan.strategies.push(pair.strategy);
    }
    Ok(plan)
}

/// Resolves nearest-keyword negatives from embeddings of `plan.batch_keywords()`.
///
/// When a positive has no admissible in-batch neighbour, a random negative is
/// drawn instead and recorded as such.
pub fn resolve_batch(
    examples: &[Example],
    plan: BatchPlan,
    embeddings: Option<&[Vec<f64>]>,
    vocab: &KeywordVocab,
    rng: &mut impl Rng,
) -> Result<AssembledBatch, DataError> {
    let candidates = plan.batch_keywords();
    let n = plan.sources.len();
    let mut keywords = plan.positives.clone();
    let mut strategies: Vec<Option<NegativeStrategy>> = vec![None; n];
    for (i, neg) in plan.negatives.iter().enumerate() {
        let transcript = &examples[plan.sources[i]].transcript;
        let (kw, strategy) = match neg {
            PendingNegative::Ready(kw) => (kw.clone(), plan.strategies[i]),
            PendingNegative::NearestInBatch => {
                let emb = embeddings.ok_or_else(|| DataError::Other("nearest-keyword negatives need embeddings".into()))?;
                match nearest_keyword(&plan.positives[i], transcript, &candidates, emb) {
                    Ok(kw) => (kw, NegativeStrategy::NearestKeyword),
                    Err(NegativeError::NoCandidate(_) | NegativeError::BatchTooSmall) => {
                        (random_negative(vocab, transcript, rng)?, NegativeStrategy::Random)
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        keywords.push(kw);
        strategies.push(Some(strategy));
    }
    let sources: Vec<usize> = plan.sources.iter().chain(&plan.sources).copied().collect();
    let feats: Vec<&MelSpectrogram> = sources.iter().map(|&s| &examples[s].features).collect();
    Ok(AssembledBatch {
        features: PaddedBatchFeatures::from_examples(&feats)?,
        labels: (0..2 * n).map(|i| i < n).collect(),
        sources,
        keywords,
        strategies,
    })
}

/// Plans and resolves a batch; `embed` maps sorted batch keywords to embeddings
/// and is only called when nearest-keyword negatives were drawn.
pub fn assemble_batch(
    examples: &[Example],
    sources: &[usize],
    vocab: &KeywordVocab,
    cfg: &NegativeConfig,
    rng: &mut impl Rng,
    embed: impl FnOnce(&[String]) -> Result<Vec<Vec<f64>>, DataError>,
) -> Result<AssembledBatch, DataError> {
    let plan = plan_batch(examples, sources, vocab, cfg, rng)?;
    let embeddings = if plan.needs_embeddings() {
        Some(embed(&plan.batch_keywords())?)
    } else {
        None
    };
    resolve_batch(examples, plan, embeddings.as_deref(), vocab, rng)
}

/// A labelled (utterance, keyword) query for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub source: usize,
    pub keyword: String,
    pub label: bool,
    pub strategy: Option<NegativeStrategy>,
}

/// `pairs_per_utterance` positives and as many negatives per utterance.
/// Nearest-keyword weight, if any, is not allowed here.
pub fn eval_pairs(
    examples: &[Example],
    vocab: &KeywordVocab,
    cfg: &NegativeConfig,
    pairs_per_utterance: usize,
    rng: &mut impl Rng,
) -> Result<Vec<EvalPair>, DataError> {
    if cfg.mix.weight(NegativeStrategy::NearestKeyword) > 0.0 {
        return Err(NegativeError::InvalidMixture("nearest-keyword negatives need a training batch".into()).into());
    }
    let mut pairs = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        for _ in 0..pairs_per_utterance {
            let pair = make_training_pair(&ex.transcript, vocab, cfg, rng)?;
            let neg = match negative_for(pair.strategy, &pair.positive, &ex.transcript, vocab, cfg, rng)? {
                PendingNegative::Ready(k) => k,
                PendingNegative::NearestInBatch => unreachable!("excluded above"),
            };
            pairs.push(EvalPair {
                source: i,
                keyword: pair.positive,
                label: true,
                strategy: None,
            });
            pairs.push(EvalPair {
                source: i,
                keyword: neg,
                label: false,
                strategy: Some(pair.strategy),
            });
        }
    }
    Ok(pairs)
}

/// Evaluation mixture: random, concat and char-sub with equal probability.
pub fn default_eval_mix() -> StrategyMix {
    StrategyMix::uniform_over(&[NegativeStrategy::Random, NegativeStrategy::Concat, NegativeStrategy::CharSub]).expect("valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());

        fs::write(dir.path().join("a.melf"), b"x").unwrap();
        fs::write(
            &p,
            concat!(
                r#"{"audio": "a.melf", "transcript": ["Hello", "there"], "lang": "en"}"#,
                "\n",
                r#"{"audio": "synthetic:4", "transcript": "one two", "lang": "en"}"#,
                "\n",
                r#"{"audio": "a.melf", "transcript": ["again"], "lang": "en"}"#,
                "\n"
            ),
        )
        .unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[0].transcript.words(), ["hello", "there"]);
        assert_eq!(m[1].audio, AudioRef::Synthetic(4));
        assert_eq!(m[2].transcript.words(), ["again"]);

        fs::write(&p, "{\"audio\": \"a.melf\", \"transcript\": [\"x\"], \"lang\": \"en\"}\n{\"audio\": \"a.melf\", \"lang\": \"en\"}\n").unwrap();
        match load_manifest(&p) {
            Err(DataError::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("transcript"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        fs::write(&p, r#"{"audio": "gone.wav", "transcript": ["x"], "lang": "en"}"#).unwrap();
        assert!(matches!(load_manifest(&p), Err(DataError::MissingAudioFile(_))));
    }

    #[test]
    fn synthesis_construction() {
        let synth = Synthesizer::new(small_spec(1)).unwrap();
        let a = synth.synthesize_id(&["abc", "de", "fgh"], 3).unwrap();
        let b = synth.synthesize_id(&["abc", "de", "fgh"], 3).unwrap();
        assert_eq!(a, b);
        let gaps: usize = a.spans.windows(2).map(|w| w[1].start - w[0].end).sum();
        assert!(a.spans.windows(2).all(|w| (2..=6).contains(&(w[1].start - w[0].end))));
        assert_eq!(a.features.n_frames(), 6 * 8 + gaps);
        assert_eq!(a.spans[1], WordSpan { word: "de".into(), start: a.spans[1].start, end: a.spans[1].start + 12 });
        assert!(matches!(synth.synthesize_id(&["a1"], 0), Err(DataError::UnknownCharacter('1'))));
    }

    #[test]
    fn noise_free_word_is_stacked_templates() {
        let spec = SynthSpec {
            template_noise_std: 0.0,
            ..small_spec(2)
        };
        let synth = Synthesizer::new(spec).unwrap();
        let u = synth.synthesize_id(&["ab"], 0).unwrap();
        let expected = [synth.template('a').unwrap(), synth.template('b').unwrap()].concat();
        assert_eq!(u.features.data(), &expected[..]);
    }

    #[test]
    fn nearest_template_decoder_recovers_characters() {
        let synth = Synthesizer::new(small_spec(3)).unwrap();
        let vocab = synth.vocabulary();
        assert_eq!(vocab.len(), 60);
        let k = 6;
        let dim = 80;
        let (mut correct, mut total) = (0usize, 0usize);
        for id in 0..200 {
            let words = synth.transcript_words(&vocab, id);
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let u = synth.synthesize_id(&refs, id).unwrap();
            for span in &u.spans {
                for (j, truth) in span.word.chars().enumerate() {
                    let start = (span.start + j * k) * dim;
                    let block = &u.features.data()[start..start + k * dim];
                    let best = synth
                        .templates()
                        .map(|(c, t)| (c, t.iter().zip(block).map(|(a, b)| (a - b).powi(2)).sum::<f32>()))
                        .min_by(|a, b| a.1.total_cmp(&b.1))
                        .unwrap()
                        .0;
                    correct += (best == truth) as usize;
                    total += 1;
                }
            }
        }
        assert!(correct as f64 >= 0.99 * total as f64, "{correct}/{total}");
    }

    #[test]
    fn corpus_round_trip_and_determinism() {
        let a = tempdir().unwrap();
        let b = tempdir().unwrap();
        let spec = small_spec(4);
        let pa = write_synthetic_corpus(&spec, 6, 3, a.path()).unwrap();
        write_synthetic_corpus(&spec, 6, 3, b.path()).unwrap();
        for name in ["train.jsonl", "eval.jsonl", "spans.json", "features/eval_00002.melf"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
        }
        let train = load_examples(&pa.train_manifest).unwrap();
        assert_eq!(train.len(), 6);
        let spans = train[0].spans.as_ref().unwrap();
        assert_eq!(spans.len(), train[0].transcript.words().len());

        // synthetic markers regenerate the same features
        let entries: Vec<ManifestEntry> = load_manifest(&pa.train_manifest)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, mut e)| {
                e.audio = AudioRef::Synthetic(i as u64);
                e
            })
            .collect();
        let marker_manifest = a.path().join("markers.jsonl");
        write_manifest(&marker_manifest, &entries).unwrap();
        let regenerated = load_examples(&marker_manifest).unwrap();
        assert_eq!(regenerated, train);

        let empty = tempdir().unwrap();
        let p = write_synthetic_corpus(&spec, 0, 1, empty.path()).unwrap();
        assert_eq!(fs::read_to_string(p.train_manifest).unwrap(), "");
    }

    fn toy_examples() -> (Vec<Example>, KeywordVocab) {
        let synth = Synthesizer::new(small_spec(5)).unwrap();
        let vocab_words = synth.vocabulary();
        let examples: Vec<Example> = (0..20)
            .map(|id| {
                let words = synth.transcript_words(&vocab_words, id);
                let refs: Vec<&str> = words.iter().map(String::as_str).collect();
                let u = synth.synthesize_id(&refs, id).unwrap();
                Example {
                    id: id.to_string(),
                    features: u.features,
                    transcript: Transcript::new(&words, "syn").unwrap(),
                    spans: Some(u.spans),
                }
            })
            .collect();
        let vocab = KeywordVocab::from_transcripts(examples.iter().map(|e| &e.transcript));
        (examples, vocab)
    }

    #[test]
    fn batches_are_balanced_and_padded() {
        let (examples, vocab) = toy_examples();
        let cfg = NegativeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for start in [0, 8] {
            let sources: Vec<usize> = (start..start + 8).collect();
            let batch = assemble_batch(&examples, &sources, &vocab, &cfg, &mut rng, |kws| {
                Ok(kws.iter().map(|k| k.chars().map(|c| c as u32 as f64).take(3).collect()).collect())
            })
            .unwrap();
            assert_eq!(batch.len(), 16);
            assert_eq!(batch.labels.iter().filter(|&&l| l).count(), 8);
            assert_eq!(batch.features.lengths().iter().max(), Some(&batch.features.t_max()));
            for i in 0..16 {
                let t = &examples[batch.sources[i]].transcript;
                assert_eq!(t.contains(&batch.keywords[i]), batch.labels[i], "{i}");
            }
        }
    }

    #[test]
    fn random_only_batches_ignore_embeddings() {
        let (examples, vocab) = toy_examples();
        let cfg = NegativeConfig {
            mix: StrategyMix::new([1.0, 0.0, 0.0, 0.0]).unwrap(),
            ..NegativeConfig::default()
        };
        let sources: Vec<usize> = (0..8).collect();
        let batch = assemble_batch(&examples, &sources, &vocab, &cfg, &mut ChaCha8Rng::seed_from_u64(1), |_| {
            panic!("embeddings requested")
        })
        .unwrap();
        assert!(batch.strategies[8..].iter().all(|s| *s == Some(NegativeStrategy::Random)));
    }

    #[test]
    fn eval_pairs_are_labelled_consistently() {
        let (examples, vocab) = toy_examples();
        let cfg = NegativeConfig {
            mix: default_eval_mix(),
            ..NegativeConfig::default()
        };
        let pairs = eval_pairs(&examples, &vocab, &cfg, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(pairs.len(), 80);
        for p in &pairs {
            assert_eq!(examples[p.source].transcript.contains(&p.keyword), p.label);
        }
        let nk = NegativeConfig::default();
        assert!(eval_pairs(&examples, &vocab, &nk, 1, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }
}
