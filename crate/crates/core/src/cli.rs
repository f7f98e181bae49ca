use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use adakws::classifier::{features_tensor, scan_to_csv, ClassifierConfig, ClassifierError};
use adakws::data::{self, load_examples, load_features, write_synthetic_corpus, DataError, SynthSpec};
use adakws::inference::{InferenceError, KeywordRegistry};
use adakws::negatives::{make_training_pair, KeywordVocab, NegativeConfig, NegativeError, PendingNegative, StrategyMix};
use adakws::numerics::NumericsError;
use adakws::text_encoder::{CharVocab, TextError};
use adakws::training::{evaluate, Checkpoint, CheckpointError, KwsModel, TrainConfig, TrainError, Trainer, CHECKPOINT_FILE};

pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const EVAL_SCORES_FILE: &str = "eval_scores.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const SCAN_FILE: &str = "scan.csv";
pub const MINED_FILE: &str = "mined.jsonl";

#[derive(Debug, Parser)]
#[command(name = "kws", version, about = "Open-vocabulary keyword spotting")]
pub struct Cli {
    /// JSON file with optional `synth`, `preset`, `classifier` and `train` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for artifacts; created if missing.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus: features, manifests, word spans.
    Synth(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Score labelled keyword queries and report F1, AUC and EER.
    Eval(EvalArgs),
    /// Probability of each listed keyword for one input.
    Predict(PredictArgs),
    /// Sliding-window probability trace for one keyword.
    Scan(ScanArgs),
    /// Sample positive/negative keyword pairs.
    Mine(MineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub n_eval: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest (JSONL).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Classifier size: desk, tiny or toy.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Sets both learning rates.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub text_lr: Option<f64>,
    #[arg(long)]
    pub classifier_lr: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Negative mixture, e.g. `random,concat` or `random=0.7,char_sub=0.3`.
    #[arg(long)]
    pub neg_mix: Option<String>,
    #[arg(long)]
    pub freeze_encoder: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Negative mixture; nearest-keyword is not available here.
    #[arg(long, default_value = "random,concat,char_sub")]
    pub neg_mix: String,
    #[arg(long, default_value_t = 1)]
    pub pairs_per_utterance: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Extra manifest whose transcripts join the negative-sampling vocabulary.
    #[arg(long)]
    pub vocab_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text file with one keyword per line.
    #[arg(long)]
    pub keywords: PathBuf,
    /// WAV (16 kHz mono) or MELF feature file.
    #[arg(long)]
    pub input: PathBuf,
    /// Cached keyword registry; read when present and current, written otherwise.
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub keyword: String,
    /// Window length in 10 ms frames.
    #[arg(long, default_value_t = 100)]
    pub window: usize,
    /// Hop between windows in frames.
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub neg_mix: Option<String>,
    /// Number of pairs.
    #[arg(short, long, default_value_t = 100)]
    pub n: usize,
    /// Text encoder for nearest-keyword negatives; a freshly seeded one otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Utterances per nearest-keyword batch.
    #[arg(long, default_value_t = 16)]
    pub batch_sources: usize,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NonFiniteValue(_) => Self::Numerical(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => Self::Numerical(e.to_string()),
            TrainError::Numerics(n) => n.into(),
            TrainError::InvalidConfig(m) => Self::Usage(m),
            other => Self::Data(other.to_string()),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Data(e.to_string())
            }
        }
    )*};
}

data_errors!(DataError, CheckpointError, InferenceError, ClassifierError, TextError, std::io::Error);

impl From<NegativeError> for CliError {
    fn from(e: NegativeError) -> Self {
        match e {
            NegativeError::InvalidMixture(_) | NegativeError::InvalidCharMap(_) => Self::Usage(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

/// Contents of `--config`. Every section is optional and partial.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    preset: Option<String>,
    classifier: Option<Value>,
    train: Option<Value>,
    synth: Option<Value>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Overlays the keys of `patch` onto the serialized `base`.
fn merged<T: Serialize + for<'de> Deserialize<'de>>(base: &T, patch: Option<&Value>, what: &str) -> Result<T, CliError> {
    let mut value = serde_json::to_value(base).expect("config serializes");
    if let Some(patch) = patch {
        let patch = patch
            .as_object()
            .ok_or_else(|| CliError::Usage(format!("`{what}` must be a JSON object")))?;
        let target = value.as_object_mut().expect("config is an object");
        for (k, v) in patch {
            if !target.contains_key(k) {
                return Err(CliError::Usage(format!("unknown {what} setting {k:?}")));
            }
            target.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{what}: {e}")))
}

fn classifier_config(file: &FileConfig, preset: Option<&str>, freeze: bool) -> Result<ClassifierConfig, CliError> {
    let name = preset.or(file.preset.as_deref()).unwrap_or("desk");
    let base = ClassifierConfig::preset(name).ok_or_else(|| CliError::Usage(format!("unknown preset {name:?} (desk, tiny, toy)")))?;
    let mut cfg: ClassifierConfig = merged(&base, file.classifier.as_ref(), "classifier")?;
    if freeze {
        cfg.freeze_encoder = true;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn parse_mix(text: &str) -> Result<StrategyMix, CliError> {
    StrategyMix::parse(text).map_err(|e| CliError::Usage(format!("--neg-mix: {e}")))
}

fn prepare_out_dir(dir: Option<&Path>) -> Result<Option<&Path>, CliError> {
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| CliError::Data(format!("{}: {e}", d.display())))?;
    }
    Ok(dir)
}

fn require_out_dir<'a>(dir: Option<&'a Path>, cmd: &str) -> Result<&'a Path, CliError> {
    let dir = dir.ok_or_else(|| CliError::Usage(format!("`{cmd}` needs --out-dir")))?;
    prepare_out_dir(Some(dir))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_resolved(dir: Option<&Path>, value: Value) -> Result<(), CliError> {
    if let Some(dir) = dir {
        let text = serde_json::to_string_pretty(&value).expect("json") + "\n";
        write_text(&dir.join(RESOLVED_CONFIG_FILE), &text)?;
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} {} does not exist", path.display())))
    }
}

fn load_model(path: &Path) -> Result<KwsModel<f32>, CliError> {
    require_file(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?.model()?)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let out = cli.out_dir.as_deref();
    match cli.command {
        Command::Synth(a) => synth(&file, cli.seed, out, a),
        Command::Train(a) => train(&file, cli.seed, out, a),
        Command::Eval(a) => eval(&file, cli.seed, out, a),
        Command::Predict(a) => predict(cli.seed, out, a),
        Command::Scan(a) => scan(cli.seed, out, a),
        Command::Mine(a) => mine(&file, cli.seed, out, a),
    }
}

fn synth(file: &FileConfig, seed: Option<u64>, out: Option<&Path>, a: SynthArgs) -> Result<(), CliError> {
    let out = require_out_dir(out, "synth")?;
    let mut spec: SynthSpec = merged(&SynthSpec::default(), file.synth.as_ref(), "synth")?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let paths = write_synthetic_corpus(&spec, a.n_train, a.n_eval, out)?;
    write_resolved(
        Some(out),
        json!({"command": "synth", "seed": spec.seed, "n_train": a.n_train, "n_eval": a.n_eval, "synth": spec}),
    )?;
    log::info!(
        "wrote {} train and {} eval utterances to {}",
        a.n_train,
        a.n_eval,
        paths.train_manifest.parent().unwrap_or(out).display()
    );
    Ok(())
}

fn train(file: &FileConfig, seed: Option<u64>, out: Option<&Path>, a: TrainArgs) -> Result<(), CliError> {
    let out = require_out_dir(out, "train")?;
    require_file(&a.manifest, "manifest")?;
    let resumed = match &a.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let base_train = resumed
        .as_ref()
        .and_then(|c| c.train_config.clone())
        .unwrap_or_else(TrainConfig::desk);
    let mut cfg: TrainConfig = merged(&base_train, file.train.as_ref(), "train")?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.text_lr = lr;
        cfg.classifier_lr = lr;
    }
    if let Some(lr) = a.text_lr {
        cfg.text_lr = lr;
    }
    if let Some(lr) = a.classifier_lr {
        cfg.classifier_lr = lr;
    }
    if let Some(o) = &a.optimizer {
        cfg.optimizer = serde_json::from_value(json!(o.to_lowercase())).map_err(|_| CliError::Usage(format!("unknown optimizer {o:?} (sgd, adam)")))?;
    }
    if let Some(m) = &a.neg_mix {
        cfg.negatives.mix = parse_mix(m)?;
    }
    cfg.validate()?;

    let examples = load_examples(&a.manifest)?;
    let vocab = KeywordVocab::from_transcripts(examples.iter().map(|e| &e.transcript));
    let mut trainer = match &resumed {
        Some(ckpt) => Trainer::from_checkpoint(ckpt, Some(cfg.clone()))?,
        None => {
            let classifier = classifier_config(file, a.preset.as_deref(), a.freeze_encoder)?;
            Trainer::from_scratch(classifier, CharVocab::default(), cfg.clone())?
        }
    };
    write_resolved(
        Some(out),
        json!({
            "command": "train",
            "manifest": a.manifest,
            "resume": a.resume,
            "seed": cfg.seed,
            "classifier": trainer.model.config(),
            "train": cfg,
        }),
    )?;
    log::info!(
        "training on {} utterances ({} keywords), {} epochs of batch {}",
        examples.len(),
        vocab.len(),
        cfg.epochs,
        cfg.batch_size
    );
    let records = trainer.fit(&examples, &vocab, Some(out))?;
    log::info!("{} steps; checkpoint at {}", records.len(), out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn eval(_file: &FileConfig, seed: Option<u64>, out: Option<&Path>, a: EvalArgs) -> Result<(), CliError> {
    let out = prepare_out_dir(out)?;
    let model = load_model(&a.checkpoint)?;
    require_file(&a.manifest, "manifest")?;
    let examples = load_examples(&a.manifest)?;
    let mut transcripts: Vec<_> = examples.iter().map(|e| e.transcript.clone()).collect();
    if let Some(extra) = &a.vocab_manifest {
        require_file(extra, "manifest")?;
        transcripts.extend(data::load_manifest(extra)?.into_iter().map(|e| e.transcript));
    }
    let vocab = KeywordVocab::from_transcripts(&transcripts);
    let negatives = NegativeConfig {
        mix: parse_mix(&a.neg_mix)?,
        ..NegativeConfig::default()
    };
    let seed = seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (report, scored) = evaluate(&model, &examples, &vocab, &negatives, a.pairs_per_utterance, a.threshold, &mut rng)?;
    let text = serde_json::to_string_pretty(&report).expect("json") + "\n";
    print!("{text}");
    if let Some(dir) = out {
        write_text(&dir.join(EVAL_REPORT_FILE), &text)?;
        let lines: String = scored
            .iter()
            .map(|s| serde_json::to_string(s).expect("json") + "\n")
            .collect();
        write_text(&dir.join(EVAL_SCORES_FILE), &lines)?;
    }
    write_resolved(
        out,
        json!({
            "command": "eval",
            "checkpoint": a.checkpoint,
            "manifest": a.manifest,
            "vocab_manifest": a.vocab_manifest,
            "seed": seed,
            "neg_mix": negatives.mix,
            "pairs_per_utterance": a.pairs_per_utterance,
            "threshold": a.threshold,
        }),
    )
}

fn read_keywords(path: &Path) -> Result<Vec<String>, CliError> {
    require_file(path, "keywords file")?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let words: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if words.is_empty() {
        return Err(CliError::Data(format!("{} lists no keywords", path.display())));
    }
    Ok(words)
}

fn predict(seed: Option<u64>, out: Option<&Path>, a: PredictArgs) -> Result<(), CliError> {
    let out = prepare_out_dir(out)?;
    let model = load_model(&a.checkpoint)?;
    let keywords = read_keywords(&a.keywords)?;
    require_file(&a.input, "input")?;
    let features = features_tensor::<f32>(&load_features(&a.input)?)?;
    let mut registry = match &a.registry {
        Some(p) if p.is_file() => KeywordRegistry::load(p, model.text.clone())?,
        _ => KeywordRegistry::new(model.text.clone()),
    };
    let before = registry.encode_calls();
    registry.register_all(&keywords)?;
    if let Some(p) = &a.registry {
        if registry.encode_calls() > before || !p.is_file() {
            registry.save(p)?;
        }
    }
    let scores = registry.score_all(&model.classifier, &features)?;
    let wanted: BTreeMap<String, f64> = keywords
        .iter()
        .map(|k| {
            let key = adakws::text_encoder::normalize_keyword(k);
            let p = scores[&key];
            (key, f64::from(p))
        })
        .collect();
    let text = serde_json::to_string_pretty(&wanted).expect("json") + "\n";
    print!("{text}");
    if let Some(dir) = out {
        write_text(&dir.join(PREDICTIONS_FILE), &text)?;
    }
    write_resolved(
        out,
        json!({"command": "predict", "checkpoint": a.checkpoint, "keywords": a.keywords, "input": a.input, "registry": a.registry, "seed": seed}),
    )
}

fn scan(seed: Option<u64>, out: Option<&Path>, a: ScanArgs) -> Result<(), CliError> {
    let out = prepare_out_dir(out)?;
    let model = load_model(&a.checkpoint)?;
    require_file(&a.input, "input")?;
    let mel = load_features(&a.input)?;
    let (norms, _) = model.text.encode_keyword(&a.keyword)?;
    let points = model.classifier.scan(&mel, &norms, a.window, a.stride).map_err(|e| match e {
        ClassifierError::WindowLargerThanUtterance { .. } | ClassifierError::InvalidScan(_) => CliError::Usage(e.to_string()),
        other => other.into(),
    })?;
    let csv = scan_to_csv(&points);
    print!("{csv}");
    if let Some(dir) = out {
        write_text(&dir.join(SCAN_FILE), &csv)?;
    }
    write_resolved(
        out,
        json!({"command": "scan", "checkpoint": a.checkpoint, "input": a.input, "keyword": a.keyword, "window": a.window, "stride": a.stride, "seed": seed}),
    )
}

#[derive(Serialize)]
struct MinedPair<'a> {
    source: &'a str,
    positive: &'a str,
    negative: &'a str,
    strategy: &'a str,
}

fn mine(file: &FileConfig, seed: Option<u64>, out: Option<&Path>, a: MineArgs) -> Result<(), CliError> {
    let out = prepare_out_dir(out)?;
    require_file(&a.manifest, "manifest")?;
    let entries = data::load_manifest(&a.manifest)?;
    if entries.is_empty() {
        return Err(CliError::Data(format!("{} has no entries", a.manifest.display())));
    }
    let base: TrainConfig = merged(&TrainConfig::desk(), file.train.as_ref(), "train")?;
    let mut negatives = base.negatives.clone();
    if let Some(m) = &a.neg_mix {
        negatives.mix = parse_mix(m)?;
    }
    let seed = seed.unwrap_or(base.seed);
    let text = match &a.checkpoint {
        Some(p) => load_model(p)?.text,
        None => KwsModel::<f32>::new(classifier_config(file, None, false)?, CharVocab::default(), seed)?.text,
    };
    let vocab = KeywordVocab::from_transcripts(entries.iter().map(|e| &e.transcript));
    let eligible: Vec<usize> = (0..entries.len())
        .filter(|&i| !entries[i].transcript.eligible_keywords().is_empty())
        .collect();
    if eligible.is_empty() {
        return Err(CliError::Data("no transcript has a keyword of at least 3 characters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = String::new();
    let mut made = 0;
    while made < a.n {
        let batch: Vec<usize> = (0..a.batch_sources.max(1).min(a.n - made))
            .map(|_| eligible[rand::Rng::gen_range(&mut rng, 0..eligible.len())])
            .collect();
        let mut pairs = Vec::with_capacity(batch.len());
        for &s in &batch {
            pairs.push(make_training_pair(&entries[s].transcript, &vocab, &negatives, &mut rng)?);
        }
        let mut positives: Vec<String> = pairs.iter().map(|p| p.positive.clone()).collect();
        positives.sort();
        positives.dedup();
        let embeddings: Option<Vec<Vec<f64>>> = if pairs.iter().any(|p| p.negative == PendingNegative::NearestInBatch) {
            let refs: Vec<&str> = positives.iter().map(String::as_str).collect();
            Some(
                text.encode_batch(&refs)?
                    .into_iter()
                    .map(|(_, e)| e.vector.iter().map(|&v| f64::from(v)).collect())
                    .collect(),
            )
        } else {
            None
        };
        for (&s, pair) in batch.iter().zip(&pairs) {
            let transcript = &entries[s].transcript;
            let (negative, strategy) = match &pair.negative {
                PendingNegative::Ready(k) => (k.clone(), pair.strategy),
                PendingNegative::NearestInBatch => {
                    let emb = embeddings.as_deref().expect("computed above");
                    match adakws::negatives::nearest_keyword(&pair.positive, transcript, &positives, emb) {
                        Ok(k) => (k, pair.strategy),
                        Err(NegativeError::NoCandidate(_) | NegativeError::BatchTooSmall) => (
                            adakws::negatives::random_negative(&vocab, transcript, &mut rng)?,
                            adakws::negatives::NegativeStrategy::Random,
                        ),
                        Err(e) => return Err(e.into()),
                    }
                }
            };
            let line = MinedPair {
                source: &entries[s].id,
                positive: &pair.positive,
                negative: &negative,
                strategy: strategy.name(),
            };
            lines.push_str(&serde_json::to_string(&line).expect("json"));
            lines.push('\n');
            made += 1;
        }
    }
    print!("{lines}");
    if let Some(dir) = out {
        write_text(&dir.join(MINED_FILE), &lines)?;
    }
    write_resolved(
        out,
        json!({"command": "mine", "manifest": a.manifest, "n": a.n, "seed": seed, "negatives": negatives, "checkpoint": a.checkpoint}),
    )
}
