use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use adakws::data::SPANS_FILE;
use adakws::training::{CHECKPOINT_FILE, LOSS_CSV};
use serde_json::Value;
use tempfile::TempDir;

fn kws(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kws"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 40 train / 100 eval utterances plus an untrained desk checkpoint, shared by every test.
struct Fixture {
    _dir: TempDir,
    corpus: PathBuf,
    untrained: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let corpus = dir.path().join("corpus");
        let o = kws(&["synth", "--out-dir", s(&corpus), "--n-train", "40", "--n-eval", "100", "--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let run = dir.path().join("untrained");
        let o = kws(&["train", "--out-dir", s(&run), "--manifest", s(&corpus.join("train.jsonl")), "--epochs", "0"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Fixture {
            corpus,
            untrained: run.join(CHECKPOINT_FILE),
            _dir: dir,
        }
    })
}

fn first_feature_file(corpus: &Path) -> PathBuf {
    let mut files: Vec<PathBuf> = fs::read_dir(corpus.join("features")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.into_iter().find(|p| p.to_string_lossy().contains("eval_")).unwrap()
}

fn schema(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs").join(name);
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(schema: &Value, doc: &Value) {
    let validator = jsonschema::validator_for(schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}\n{doc:#}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&kws(&["frobnicate"])), 1);
    assert_eq!(code(&kws(&["train", "--manifest", "x.jsonl"])), 1);
    let dir = TempDir::new().unwrap();
    let f = fixture();
    let o = kws(&[
        "train",
        "--out-dir",
        s(dir.path()),
        "--manifest",
        s(&f.corpus.join("train.jsonl")),
        "--neg-mix",
        "random,bogus",
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"epoch": 3}}"#).unwrap();
    let o = kws(&["--config", s(&cfg), "train", "--out-dir", s(dir.path()), "--manifest", s(&f.corpus.join("train.jsonl"))]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert_eq!(code(&kws(&["--help"])), 0);
}

#[test]
fn missing_manifest_is_a_data_error_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nowhere/train.jsonl");
    let o = kws(&["train", "--out-dir", s(dir.path()), "--manifest", s(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn synth_is_deterministic_and_sized() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = kws(&["synth", "--out-dir", s(d), "--n-train", "500", "--n-eval", "3", "--seed", "11"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let train = fs::read_to_string(a.join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 500);
    assert_eq!(train.replace(s(&a), ""), fs::read_to_string(b.join("train.jsonl")).unwrap().replace(s(&b), ""));
    assert_eq!(fs::read(a.join(SPANS_FILE)).unwrap(), fs::read(b.join(SPANS_FILE)).unwrap());
    for entry in fs::read_dir(a.join("features")).unwrap() {
        let p = entry.unwrap().path();
        assert_eq!(fs::read(&p).unwrap(), fs::read(b.join("features").join(p.file_name().unwrap())).unwrap());
    }

    let empty = dir.path().join("empty");
    let o = kws(&["synth", "--out-dir", s(&empty), "--n-train", "0", "--n-eval", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(empty.join("train.jsonl")).unwrap(), "");
}

#[test]
fn untrained_checkpoint_scores_at_chance() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    let o = kws(&[
        "eval",
        "--out-dir",
        s(out.path()),
        "--checkpoint",
        s(&f.untrained),
        "--manifest",
        s(&f.corpus.join("eval.jsonl")),
        "--pairs-per-utterance",
        "5",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.path().join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["n_pos"].as_u64().unwrap() + report["n_neg"].as_u64().unwrap(), 1000);
    let auc = report["auc"].as_f64().unwrap();
    assert!((auc - 0.5).abs() <= 0.05, "auc {auc}");
    assert_eq!(serde_json::from_slice::<Value>(&o.stdout).unwrap(), report);
    assert_valid(&schema("eval_report.schema.json"), &report);
    let scores = fs::read_to_string(out.path().join("eval_scores.jsonl")).unwrap();
    assert_eq!(scores.lines().count(), 1000);
}

#[test]
fn flags_override_config_file_and_are_echoed() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"preset": "desk", "train": {"epochs": 4, "batch_size": 8, "negatives": {"n_subs": 2}}, "classifier": {"adain_eps": 1e-4}}"#).unwrap();
    assert_valid(&schema("config.schema.json"), &serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap());
    let out = dir.path().join("run");
    let o = kws(&[
        "--config",
        s(&cfg),
        "--seed",
        "99",
        "train",
        "--out-dir",
        s(&out),
        "--manifest",
        s(&f.corpus.join("train.jsonl")),
        "--epochs",
        "0",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resolved: Value = serde_json::from_str(&fs::read_to_string(out.join("resolved-config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["epochs"], 0);
    assert_eq!(resolved["train"]["batch_size"], 8);
    assert_eq!(resolved["train"]["seed"], 99);
    assert_eq!(resolved["train"]["negatives"]["n_subs"], 2);
    assert_eq!(resolved["classifier"]["adain_eps"], 1e-4);
    let echoed = serde_json::json!({"train": resolved["train"], "classifier": resolved["classifier"]});
    assert_valid(&schema("config.schema.json"), &echoed);
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = kws(&[
            "train",
            "--out-dir",
            s(&out),
            "--manifest",
            s(&f.corpus.join("train.jsonl")),
            "--epochs",
            "1",
            "--batch-size",
            "8",
            "--seed",
            "5",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (fs::read_to_string(out.join(LOSS_CSV)).unwrap(), fs::read(out.join(CHECKPOINT_FILE)).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.0.lines().count(), 1 + 40 / 4);
    assert_eq!(a, b);
}

#[test]
fn diverging_training_exits_three() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let o = kws(&[
        "train",
        "--out-dir",
        s(dir.path()),
        "--manifest",
        s(&f.corpus.join("train.jsonl")),
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--optimizer",
        "sgd",
        "--lr",
        "1e38",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn predict_scan_and_mine_write_their_artifacts() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let input = first_feature_file(&f.corpus);
    let keywords = dir.path().join("keywords.txt");
    fs::write(&keywords, "alpha\nBeta\n\ngamma\n").unwrap();
    let registry = dir.path().join("registry.json");
    let predict = || {
        kws(&[
            "predict",
            "--out-dir",
            s(dir.path()),
            "--checkpoint",
            s(&f.untrained),
            "--keywords",
            s(&keywords),
            "--input",
            s(&input),
            "--registry",
            s(&registry),
        ])
    };
    let o = predict();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let probs: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("predictions.json")).unwrap()).unwrap();
    let probs = probs.as_object().unwrap();
    assert_eq!(probs.keys().collect::<Vec<_>>(), ["alpha", "beta", "gamma"]);
    assert!(probs.values().all(|p| (0.0..=1.0).contains(&p.as_f64().unwrap())));
    assert!(registry.is_file());
    let o2 = predict();
    assert_eq!(code(&o2), 0, "{}", stderr(&o2));
    assert_eq!(o.stdout, o2.stdout);

    let o = kws(&[
        "scan",
        "--out-dir",
        s(dir.path()),
        "--checkpoint",
        s(&f.untrained),
        "--input",
        s(&input),
        "--keyword",
        "alpha",
        "--window",
        "40",
        "--stride",
        "10",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("scan.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
    let o = kws(&["scan", "--checkpoint", s(&f.untrained), "--input", s(&input), "--keyword", "alpha", "--window", "100000"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    let mine = |seed: &str| {
        kws(&[
            "mine",
            "--out-dir",
            s(dir.path()),
            "--manifest",
            s(&f.corpus.join("train.jsonl")),
            "--neg-mix",
            "random,concat,char_sub,nearest_keyword",
            "-n",
            "50",
            "--seed",
            seed,
        ])
    };
    let o = mine("1");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(o.stdout, mine("1").stdout);
    let mined = fs::read_to_string(dir.path().join("mined.jsonl")).unwrap();
    assert_eq!(mined.lines().count(), 50);
    for line in mined.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_ne!(v["positive"], v["negative"]);
        assert!(["random", "concat", "char_sub", "nearest_keyword"].contains(&v["strategy"].as_str().unwrap()));
    }
}
