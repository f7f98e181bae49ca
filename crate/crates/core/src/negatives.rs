//! Negative keyword generation: random, character substitution,
//! concatenation, and in-batch nearest keyword.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shortest word that may serve as a keyword.
pub const MIN_KEYWORD_CHARS: usize = 3;
/// Resampling budget before giving up on a colliding substitution.
pub const MAX_RESAMPLES: usize = 8;
const LATIN: &str = "abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NegativeError {
    #[error("no keyword outside the transcript is available")]
    ExhaustedVocabulary,
    #[error("keyword {0:?} is too short to substitute")]
    KeywordTooShort(String),
    #[error("substitutions of {0:?} kept colliding with the transcript")]
    CollisionUnresolvable(String),
    #[error("keyword {0:?} has a zero-norm embedding")]
    DegenerateEmbedding(String),
    #[error("batch needs at least two distinct keywords")]
    BatchTooSmall,
    #[error("no batch keyword remains after excluding the transcript of {0:?}")]
    NoCandidate(String),
    #[error("transcript has no word of at least {MIN_KEYWORD_CHARS} characters")]
    NoEligibleKeyword,
    #[error("invalid transcript: {0}")]
    InvalidTranscript(String),
    #[error("invalid similar-character map: {0}")]
    InvalidCharMap(String),
    #[error("invalid strategy mixture: {0}")]
    InvalidMixture(String),
    #[error("{0}")]
    Io(String),
}

/// Word sequence of one utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    words: Vec<String>,
    lang: String,
}

impl Transcript {
    /// Lowercases every word; rejects empty transcripts and empty words.
    pub fn new<S: AsRef<str>>(words: &[S], lang: impl Into<String>) -> Result<Self, NegativeError> {
        if words.is_empty() {
            return Err(NegativeError::InvalidTranscript("no words".into()));
        }
        let words: Vec<String> = words.iter().map(|w| w.as_ref().trim().to_lowercase()).collect();
        if words.iter().any(|w| w.is_empty() || w.contains(char::is_whitespace)) {
            return Err(NegativeError::InvalidTranscript(format!("bad word in {words:?}")));
        }
        Ok(Self {
            words,
            lang: lang.into(),
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn lang(&self) -> &str {
        &self.lang
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.iter().any(|w| w == word)
    }

    /// Words long enough to be sampled as positive keywords, in order.
    pub fn eligible_keywords(&self) -> Vec<&str> {
        self.words
            .iter()
            .filter(|w| w.chars().count() >= MIN_KEYWORD_CHARS)
            .map(String::as_str)
            .collect()
    }
}

/// Sorted, de-duplicated keyword set.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordVocab {
    words: Vec<String>,
}

impl KeywordVocab {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        Self {
            words: set.into_iter().collect(),
        }
    }

    /// Every eligible word of the given transcripts.
    pub fn from_transcripts<'a>(transcripts: impl IntoIterator<Item = &'a Transcript>) -> Self {
        Self::new(transcripts.into_iter().flat_map(|t| t.eligible_keywords()))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    fn outside<'a>(&'a self, transcript: &'a Transcript) -> Vec<&'a str> {
        self.words
            .iter()
            .filter(|w| !transcript.contains(w))
            .map(String::as_str)
            .collect()
    }
}

/// Acoustically similar replacements per character.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<char, Vec<char>>", into = "BTreeMap<char, Vec<char>>")]
pub struct SimilarCharMap {
    map: BTreeMap<char, Vec<char>>,
}

impl Default for SimilarCharMap {
    fn default() -> Self {
        let pairs = [
            ('s', 'z'),
            ('p', 'b'),
            ('t', 'd'),
            ('k', 'g'),
            ('f', 'v'),
            ('c', 'k'),
            ('m', 'n'),
            ('i', 'y'),
            ('a', 'e'),
            ('o', 'u'),
        ];
        let mut map: BTreeMap<char, Vec<char>> = BTreeMap::new();
        for (a, b) in pairs {
            map.entry(a).or_default().push(b);
            map.entry(b).or_default().push(a);
        }
        Self { map }
    }
}

impl TryFrom<BTreeMap<char, Vec<char>>> for SimilarCharMap {
    type Error = NegativeError;

    fn try_from(map: BTreeMap<char, Vec<char>>) -> Result<Self, Self::Error> {
        for (k, vs) in &map {
            if vs.is_empty() {
                return Err(NegativeError::InvalidCharMap(format!("{k:?} has no replacements")));
            }
            if vs.contains(k) {
                return Err(NegativeError::InvalidCharMap(format!("{k:?} maps to itself")));
            }
        }
        Ok(Self { map })
    }
}

impl From<SimilarCharMap> for BTreeMap<char, Vec<char>> {
    fn from(m: SimilarCharMap) -> Self {
        m.map
    }
}

impl SimilarCharMap {
    pub fn from_json(text: &str) -> Result<Self, NegativeError> {
        serde_json::from_str(text).map_err(|e| NegativeError::InvalidCharMap(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NegativeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| NegativeError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn similar(&self, c: char) -> Option<&[char]> {
        self.map.get(&c).map(Vec::as_slice)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstitutionMode {
    #[default]
    Similar,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    Random,
    CharSub,
    Concat,
    NearestKeyword,
}

impl NegativeStrategy {
    pub const ALL: [NegativeStrategy; 4] = [Self::Random, Self::CharSub, Self::Concat, Self::NearestKeyword];

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::CharSub => "char_sub",
            Self::Concat => "concat",
            Self::NearestKeyword => "nearest_keyword",
        }
    }
}

impl fmt::Display for NegativeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NegativeStrategy {
    type Err = NegativeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_lowercase().replace('-', "_");
        match s.as_str() {
            "random" => Ok(Self::Random),
            "char_sub" | "charsub" | "swap" => Ok(Self::CharSub),
            "concat" => Ok(Self::Concat),
            "nearest_keyword" | "nk" => Ok(Self::NearestKeyword),
            _ => Err(NegativeError::InvalidMixture(format!("unknown strategy {s:?}"))),
        }
    }
}

/// Sampling weights over [`NegativeStrategy::ALL`], in that order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<NegativeStrategy, f64>", into = "BTreeMap<NegativeStrategy, f64>")]
pub struct StrategyMix {
    weights: [f64; 4],
}

impl Default for StrategyMix {
    fn default() -> Self {
        Self { weights: [0.25; 4] }
    }
}

impl StrategyMix {
    pub fn new(weights: [f64; 4]) -> Result<Self, NegativeError> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(NegativeError::InvalidMixture(format!("negative or non-finite weight in {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(NegativeError::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    /// Equal weight over the listed strategies.
    pub fn uniform_over(strategies: &[NegativeStrategy]) -> Result<Self, NegativeError> {
        let set: BTreeSet<NegativeStrategy> = strategies.iter().copied().collect();
        if set.is_empty() {
            return Err(NegativeError::InvalidMixture("no strategies".into()));
        }
        let mut weights = [0.0; 4];
        for (i, s) in NegativeStrategy::ALL.iter().enumerate() {
            if set.contains(s) {
                weights[i] = 1.0 / set.len() as f64;
            }
        }
        Self::new(weights)
    }

    /// Parses `random,concat` (equal weights) or `random=0.5,concat=0.5`.
    pub fn parse(text: &str) -> Result<Self, NegativeError> {
        let parts: Vec<&str> = text.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        if parts.iter().all(|p| !p.contains('=')) {
            let strategies = parts.iter().map(|p| p.parse()).collect::<Result<Vec<_>, _>>()?;
            return Self::uniform_over(&strategies);
        }
        let mut weights = [0.0; 4];
        for p in parts {
            let (name, w) = p
                .split_once('=')
                .ok_or_else(|| NegativeError::InvalidMixture(format!("expected name=weight, got {p:?}")))?;
            let s: NegativeStrategy = name.parse()?;
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| NegativeError::InvalidMixture(format!("bad weight {w:?}")))?;
            weights[NegativeStrategy::ALL.iter().position(|x| *x == s).expect("listed")] = w;
        }
        Self::new(weights)
    }

    pub fn weight(&self, s: NegativeStrategy) -> f64 {
        self.weights[NegativeStrategy::ALL.iter().position(|x| *x == s).expect("listed")]
    }

    pub fn sample(&self, rng: &mut impl Rng) -> NegativeStrategy {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = NegativeStrategy::Random;
        for (s, &w) in NegativeStrategy::ALL.iter().zip(&self.weights) {
            if w > 0.0 {
                acc += w;
                last = *s;
                if u < acc {
                    return *s;
                }
            }
        }
        last
    }
}

impl TryFrom<BTreeMap<NegativeStrategy, f64>> for StrategyMix {
    type Error = NegativeError;

    fn try_from(map: BTreeMap<NegativeStrategy, f64>) -> Result<Self, Self::Error> {
        let mut weights = [0.0; 4];
        for (i, s) in NegativeStrategy::ALL.iter().enumerate() {
            weights[i] = map.get(s).copied().unwrap_or(0.0);
        }
        Self::new(weights)
    }
}

impl From<StrategyMix> for BTreeMap<NegativeStrategy, f64> {
    fn from(m: StrategyMix) -> Self {
        NegativeStrategy::ALL.iter().copied().zip(m.weights).collect()
    }
}

/// Uniform draw from `vocab` minus the transcript words.
pub fn random_negative(vocab: &KeywordVocab, transcript: &Transcript, rng: &mut impl Rng) -> Result<String, NegativeError> {
    vocab
        .outside(transcript)
        .choose(rng)
        .map(|s| s.to_string())
        .ok_or(NegativeError::ExhaustedVocabulary)
}

/// Replaces the characters at `positions`. Never returns the input unchanged.
pub fn substitute_at(keyword: &str, positions: &[usize], map: &SimilarCharMap, mode: SubstitutionMode, rng: &mut impl Rng) -> String {
    let mut chars: Vec<char> = keyword.chars().collect();
    for &p in positions {
        let original = chars[p];
        let similar = match mode {
            SubstitutionMode::Similar => map.similar(original).filter(|s| s.iter().any(|&c| c != original)),
            SubstitutionMode::Random => None,
        };
        chars[p] = match similar {
            Some(options) => loop {
                let c = *options.choose(rng).expect("non-empty");
                if c != original {
                    break c;
                }
            },
            None => loop {
                let c = LATIN.as_bytes()[rng.gen_range(0..LATIN.len())] as char;
                if c != original {
                    break c;
                }
            },
        };
    }
    chars.into_iter().collect()
}

/// Alters `n_subs` distinct positions of `keyword`, chosen uniformly.
pub fn char_substitute(
    keyword: &str,
    transcript: &Transcript,
    map: &SimilarCharMap,
    n_subs: usize,
    mode: SubstitutionMode,
    rng: &mut impl Rng,
) -> Result<String, NegativeError> {
    let len = keyword.chars().count();
    if len < 2 {
        return Err(NegativeError::KeywordTooShort(keyword.to_string()));
    }
    let n_subs = n_subs.clamp(1, len);
    for _ in 0..MAX_RESAMPLES {
        let positions = index::sample(rng, len, n_subs).into_vec();
        let candidate = substitute_at(keyword, &positions, map, mode, rng);
        if !transcript.contains(&candidate) {
            return Ok(candidate);
        }
    }
    Err(NegativeError::CollisionUnresolvable(keyword.to_string()))
}

/// `other ∘ keyword` when `prefix`, else `keyword ∘ other`.
pub fn concat_with(keyword: &str, other: &str, prefix: bool) -> String {
    if prefix {
        format!("{other}{keyword}")
    } else {
        format!("{keyword}{other}")
    }
}

pub fn concat_negative(keyword: &str, vocab: &KeywordVocab, transcript: &Transcript, rng: &mut impl Rng) -> Result<String, NegativeError> {
    let candidates = vocab.outside(transcript);
    for _ in 0..MAX_RESAMPLES {
        let other = candidates.choose(rng).ok_or(NegativeError::ExhaustedVocabulary)?;
        let joined = concat_with(keyword, other, rng.gen_bool(0.5));
        if !transcript.contains(&joined) {
            return Ok(joined);
        }
    }
    Err(NegativeError::CollisionUnresolvable(keyword.to_string()))
}

/// Cosine distance `1 − ⟨a,b⟩ / (‖a‖‖b‖)` in f64.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// In-batch keyword nearest to `positive` in embedding space.
///
/// Candidates exclude `positive` and every word of `exclude`. Ties go to the
/// lexicographically smallest keyword.
pub fn nearest_keyword(positive: &str, exclude: &Transcript, keywords: &[String], embeddings: &[Vec<f64>]) -> Result<String, NegativeError> {
    assert_eq!(keywords.len(), embeddings.len(), "one embedding per keyword");
    let distinct: BTreeSet<&str> = keywords.iter().map(String::as_str).collect();
    if distinct.len() < 2 {
        return Err(NegativeError::BatchTooSmall);
    }
    let anchor = keywords
        .iter()
        .position(|k| k == positive)
        .map(|i| &embeddings[i])
        .ok_or(NegativeError::BatchTooSmall)?;
    let zero_norm = |e: &[f64]| e.iter().all(|&x| x == 0.0);
    if zero_norm(anchor) {
        return Err(NegativeError::DegenerateEmbedding(positive.to_string()));
    }
    let mut best: Option<(f64, &str)> = None;
    for (k, e) in keywords.iter().zip(embeddings) {
        if k == positive || exclude.contains(k) {
            continue;
        }
        if zero_norm(e) {
            return Err(NegativeError::DegenerateEmbedding(k.clone()));
        }
        let d = cosine_distance(anchor, e);
        let better = match best {
            None => true,
            Some((bd, bk)) => d < bd || (d == bd && k.as_str() < bk),
        };
        if better {
            best = Some((d, k));
        }
    }
    best.map(|(_, k)| k.to_string())
        .ok_or_else(|| NegativeError::NoCandidate(positive.to_string()))
}

/// Knobs shared by every negative sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegativeConfig {
    pub mix: StrategyMix,
    pub char_map: SimilarCharMap,
    pub n_subs: usize,
    pub sub_mode: SubstitutionMode,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        Self {
            mix: StrategyMix::default(),
            char_map: SimilarCharMap::default(),
            n_subs: 1,
            sub_mode: SubstitutionMode::Similar,
        }
    }
}

/// A negative keyword, or a marker that it must be chosen against batch embeddings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PendingNegative {
    Ready(String),
    NearestInBatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub positive: String,
    pub negative: PendingNegative,
    pub strategy: NegativeStrategy,
}

/// Negative keyword for `positive` using a specific non-NK strategy.
pub fn negative_for(
    strategy: NegativeStrategy,
    positive: &str,
    transcript: &Transcript,
    vocab: &KeywordVocab,
    cfg: &NegativeConfig,
    rng: &mut impl Rng,
) -> Result<PendingNegative, NegativeError> {
    Ok(PendingNegative::Ready(match strategy {
        NegativeStrategy::Random => random_negative(vocab, transcript, rng)?,
        NegativeStrategy::CharSub => char_substitute(positive, transcript, &cfg.char_map, cfg.n_subs, cfg.sub_mode, rng)?,
        NegativeStrategy::Concat => concat_negative(positive, vocab, transcript, rng)?,
        NegativeStrategy::NearestKeyword => return Ok(PendingNegative::NearestInBatch),
    }))
}

/// Samples a positive keyword from `transcript` and a negative per the mixture.
pub fn make_training_pair(transcript: &Transcript, vocab: &KeywordVocab, cfg: &NegativeConfig, rng: &mut impl Rng) -> Result<TrainingPair, NegativeError> {
    let positive = transcript
        .eligible_keywords()
        .choose(rng)
        .map(|s| s.to_string())
        .ok_or(NegativeError::NoEligibleKeyword)?;
    let strategy = cfg.mix.sample(rng);
    let negative = negative_for(strategy, &positive, transcript, vocab, cfg, rng)?;
    Ok(TrainingPair {
        positive,
        negative,
        strategy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tr(words: &[&str]) -> Transcript {
        Transcript::new(words, "en").unwrap()
    }

    fn random_word(rng: &mut impl Rng) -> String {
        let len = rng.gen_range(3..=8);
        (0..len).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect()
    }

    #[test]
    fn transcript_validation() {
        assert!(Transcript::new::<&str>(&[], "en").is_err());
        assert!(Transcript::new(&["ok", ""], "en").is_err());
        let t = tr(&["Hello", "an", "World"]);
        assert_eq!(t.words(), ["hello", "an", "world"]);
        assert_eq!(t.eligible_keywords(), ["hello", "world"]);
    }

    #[test]
    fn random_negative_forced_choice() {
        let vocab = KeywordVocab::new(["a", "b", "c"]);
        let t = tr(&["a", "b"]);
        let mut r = rng(0);
        for _ in 0..100 {
            assert_eq!(random_negative(&vocab, &t, &mut r).unwrap(), "c");
        }
        let all = tr(&["a", "b", "c"]);
        assert_eq!(random_negative(&vocab, &all, &mut r), Err(NegativeError::ExhaustedVocabulary));
    }

    #[test]
    fn random_negative_is_uniform() {
        let vocab = KeywordVocab::new((0..10).map(|i| format!("word{i}")));
        let t = tr(&["word3", "word7"]);
        let mut r = rng(1);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let n = 10_000;
        for _ in 0..n {
            let w = random_negative(&vocab, &t, &mut r).unwrap();
            assert!(!t.contains(&w));
            *counts.entry(w).or_default() += 1;
        }
        assert_eq!(counts.len(), 8);
        let expected = n as f64 / 8.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 7 degrees of freedom, p = 0.01
        assert!(chi2 < 18.475, "chi2 {chi2}");
    }

    #[test]
    fn similar_substitution_examples() {
        let map = SimilarCharMap::default();
        let mut r = rng(2);
        assert_eq!(substitute_at("pass", &[0], &map, SubstitutionMode::Similar, &mut r), "bass");
        assert_eq!(substitute_at("so", &[0], &map, SubstitutionMode::Similar, &mut r), "zo");
        // unmapped characters fall back to a random different letter
        let w = substitute_at("hw", &[0], &map, SubstitutionMode::Similar, &mut r);
        assert!(w.ends_with('w') && !w.starts_with('h'));
    }

    #[test]
    fn char_substitute_contract() {
        let map = SimilarCharMap::default();
        let mut r = rng(3);
        for i in 0..10_000 {
            let w = random_word(&mut r);
            let t = tr(&[w.as_str(), "filler"]);
            let mode = if i % 2 == 0 { SubstitutionMode::Similar } else { SubstitutionMode::Random };
            let n = 1 + i % 2;
            let out = char_substitute(&w, &t, &map, n, mode, &mut r).unwrap();
            assert_ne!(out, w);
            assert_eq!(out.chars().count(), w.chars().count());
            let diffs = out.chars().zip(w.chars()).filter(|(a, b)| a != b).count();
            assert_eq!(diffs, n);
        }
        assert!(matches!(
            char_substitute("a", &tr(&["a"]), &map, 1, SubstitutionMode::Similar, &mut r),
            Err(NegativeError::KeywordTooShort(_))
        ));
        // the only similar-mode outcome is in the transcript
        assert!(matches!(
            char_substitute("pp", &tr(&["pp", "bp", "pb"]), &map, 1, SubstitutionMode::Similar, &mut r),
            Err(NegativeError::CollisionUnresolvable(_))
        ));
    }

    #[test]
    fn char_map_validation_and_json() {
        assert!(SimilarCharMap::from_json(r#"{"a": ["a"]}"#).is_err());
        assert!(SimilarCharMap::from_json(r#"{"a": []}"#).is_err());
        let m = SimilarCharMap::from_json(r#"{"q": ["k", "c"]}"#).unwrap();
        assert_eq!(m.similar('q'), Some(&['k', 'c'][..]));
        let d = SimilarCharMap::default();
        assert_eq!(d.similar('k'), Some(&['g', 'c'][..]));
        let back: SimilarCharMap = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn concat_examples() {
        assert_eq!(concat_with("world", "hello", true), "helloworld");
        assert_eq!(concat_with("world", "hello", false), "worldhello");
        let vocab = KeywordVocab::new(["alpha", "beta", "gamma", "delta"]);
        let t = tr(&["alpha", "beta"]);
        let mut r = rng(4);
        let mut sides = [0usize; 2];
        for _ in 0..1000 {
            let out = concat_negative("beta", &vocab, &t, &mut r).unwrap();
            let other = if let Some(o) = out.strip_suffix("beta") {
                sides[0] += 1;
                o
            } else {
                sides[1] += 1;
                out.strip_prefix("beta").unwrap()
            };
            assert!(other == "gamma" || other == "delta");
            assert_eq!(out.len(), other.len() + 4);
        }
        assert!(sides[0] > 400 && sides[1] > 400);
    }

    #[test]
    fn nearest_keyword_basics() {
        let empty = tr(&["zzz"]);
        let kws = vec!["pos".to_string(), "w".to_string()];
        let emb = vec![vec![1.0, 0.0], vec![-1.0, 0.5]];
        assert_eq!(nearest_keyword("pos", &empty, &kws, &emb).unwrap(), "w");

        let kws: Vec<String> = ["pos", "far", "same", "near"].iter().map(|s| s.to_string()).collect();
        let emb = vec![vec![1.0, 2.0], vec![-1.0, 0.0], vec![2.0, 4.0], vec![1.0, 1.9]];
        assert_eq!(nearest_keyword("pos", &empty, &kws, &emb).unwrap(), "same");
        // transcript words are excluded
        assert_eq!(nearest_keyword("pos", &tr(&["pos", "same"]), &kws, &emb).unwrap(), "near");
        // ties resolve lexicographically
        let kws: Vec<String> = ["p", "b", "a"].iter().map(|s| s.to_string()).collect();
        let emb = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]];
        assert_eq!(nearest_keyword("p", &empty, &kws, &emb).unwrap(), "a");

        let one = vec!["x".to_string(), "x".to_string()];
        assert_eq!(nearest_keyword("x", &empty, &one, &emb[..2]), Err(NegativeError::BatchTooSmall));
        let zero = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        assert!(matches!(nearest_keyword("p", &empty, &kws, &zero), Err(NegativeError::DegenerateEmbedding(_))));
        assert!(matches!(
            nearest_keyword("p", &tr(&["a", "b"]), &kws, &emb),
            Err(NegativeError::NoCandidate(_))
        ));
    }

    #[test]
    fn mixture_parsing_and_validation() {
        assert!(StrategyMix::new([0.5, 0.5, 0.1, 0.0]).is_err());
        assert!(StrategyMix::new([1.5, -0.5, 0.0, 0.0]).is_err());
        let m = StrategyMix::parse("random, concat, swap").unwrap();
        assert!((m.weight(NegativeStrategy::CharSub) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.weight(NegativeStrategy::NearestKeyword), 0.0);
        let m = StrategyMix::parse("random=0.75,nk=0.25").unwrap();
        assert_eq!(m.weight(NegativeStrategy::Random), 0.75);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<StrategyMix>(&json).unwrap(), m);
        assert!(StrategyMix::parse("bogus").is_err());
    }

    #[test]
    fn degenerate_mixture_always_random() {
        let cfg = NegativeConfig {
            mix: StrategyMix::new([1.0, 0.0, 0.0, 0.0]).unwrap(),
            ..NegativeConfig::default()
        };
        let vocab = KeywordVocab::new(["alpha", "beta", "gamma", "delta"]);
        let t = tr(&["alpha", "to", "beta"]);
        let mut r = rng(5);
        for _ in 0..1000 {
            let pair = make_training_pair(&t, &vocab, &cfg, &mut r).unwrap();
            assert_eq!(pair.strategy, NegativeStrategy::Random);
            assert!(pair.positive == "alpha" || pair.positive == "beta");
        }
        assert_eq!(
            make_training_pair(&tr(&["to", "a"]), &vocab, &cfg, &mut r),
            Err(NegativeError::NoEligibleKeyword)
        );
    }

    #[test]
    fn default_mixture_frequencies_and_contract() {
        let cfg = NegativeConfig::default();
        let mut r = rng(6);
        let words: Vec<String> = (0..60).map(|_| random_word(&mut r)).collect();
        let vocab = KeywordVocab::new(&words);
        let mut counts = BTreeMap::new();
        let n = 10_000;
        for _ in 0..n {
            let picked: Vec<&str> = words.choose_multiple(&mut r, 4).map(String::as_str).collect();
            let t = tr(&picked);
            let pair = make_training_pair(&t, &vocab, &cfg, &mut r).unwrap();
            *counts.entry(pair.strategy).or_insert(0usize) += 1;
            match pair.negative {
                PendingNegative::Ready(neg) => {
                    assert!(!t.contains(&neg));
                    assert!(!neg.is_empty() && neg == neg.to_lowercase());
                }
                PendingNegative::NearestInBatch => assert_eq!(pair.strategy, NegativeStrategy::NearestKeyword),
            }
        }
        for s in NegativeStrategy::ALL {
            let f = counts[&s] as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.03, "{s}: {f}");
        }
    }

    #[test]
    fn fixed_seed_reproduces_negatives() {
        let cfg = NegativeConfig::default();
        let vocab = KeywordVocab::new(["alpha", "beta", "gamma", "delta", "omega"]);
        let t = tr(&["alpha", "beta"]);
        let run = |seed| {
            let mut r = rng(seed);
            (0..200).map(|_| make_training_pair(&t, &vocab, &cfg, &mut r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }
}
