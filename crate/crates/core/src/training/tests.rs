use super::*;
use crate::data::{Synthesizer, SynthSpec};
use crate::negatives::{StrategyMix, Transcript};
use crate::numerics::relative_error;
use tempfile::tempdir;

fn toy_corpus(n: usize) -> (Vec<Example>, KeywordVocab) {
    let spec = SynthSpec {
        seed: 3,
        feature_dim: 4,
        chars_per_template: 2,
        vocab_size: 12,
        word_len_max: 5,
        words_min: 2,
        words_max: 3,
        ..SynthSpec::default()
    };
    let synth = Synthesizer::new(spec).unwrap();
    let words = synth.vocabulary();
    let examples: Vec<Example> = (0..n as u64)
        .map(|id| {
            let w = synth.transcript_words(&words, id);
            let refs: Vec<&str> = w.iter().map(String::as_str).collect();
            let u = synth.synthesize_id(&refs, id).unwrap();
            Example {
                id: id.to_string(),
                features: u.features,
                transcript: Transcript::new(&w, "syn").unwrap(),
                spans: Some(u.spans),
            }
        })
        .collect();
    let vocab = KeywordVocab::from_transcripts(examples.iter().map(|e| &e.transcript));
    (examples, vocab)
}

fn toy_config(batch_size: usize) -> TrainConfig {
    TrainConfig {
        batch_size,
        epochs: 2,
        text_lr: 1e-3,
        classifier_lr: 1e-3,
        seed: 5,
        ..TrainConfig::desk()
    }
}

fn toy_trainer(cfg: TrainConfig) -> Trainer {
    Trainer::from_scratch(ClassifierConfig::toy(), CharVocab::default(), cfg).unwrap()
}

#[test]
fn bce_values() {
    assert!((bce_loss(&[0.5], &[true]) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((bce_loss(&[0.5], &[false]) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((bce_loss(&[0.9], &[true]) - 0.105_360_515_657_826_3).abs() < 1e-12);
    assert!(bce_loss(&[1.0, 0.0], &[true, false]) < 2e-7);
    assert!(bce_loss(&[0.0], &[true]).is_finite());

    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::scalar(0.9));
    let l = record_bce(&mut g, p, true, 1.0).unwrap();
    assert!((g.value(l).data()[0] - bce_loss(&[0.9], &[true])).abs() < 1e-15);
    let l = record_bce(&mut g, p, false, 0.5).unwrap();
    assert!((g.value(l).data()[0] - 0.5 * bce_loss(&[0.9], &[false])).abs() < 1e-15);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::desk().validate().is_ok());
    assert_eq!(TrainConfig::paper().batch_size, 144);
    assert!(TrainConfig { batch_size: 7, ..TrainConfig::desk() }.validate().is_err());
    assert!(TrainConfig { text_lr: f64::NAN, ..TrainConfig::desk() }.validate().is_err());
    let json = serde_json::to_string(&TrainConfig::desk()).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::desk());
    let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "optimizer": "sgd"}"#).unwrap();
    assert_eq!((partial.epochs, partial.optimizer, partial.batch_size), (3, OptimizerKind::Sgd, 32));
}

fn toy_batch(examples: &[Example], vocab: &KeywordVocab, n: usize) -> AssembledBatch {
    let cfg = NegativeConfig {
        mix: StrategyMix::parse("random,concat,char_sub").unwrap(),
        ..NegativeConfig::default()
    };
    let sources: Vec<usize> = (0..n).collect();
    crate::data::assemble_batch(examples, &sources, vocab, &cfg, &mut ChaCha8Rng::seed_from_u64(1), |_| unreachable!()).unwrap()
}

#[test]
fn factorized_gradient_matches_end_to_end() {
    let (examples, vocab) = toy_corpus(8);
    let batch = toy_batch(&examples, &vocab, 3);
    let model = KwsModel::<f32>::new(ClassifierConfig::toy(), CharVocab::default(), 9).unwrap().cast::<f64>();
    let text = TextPass::new(&model.text, &batch.keywords, true).unwrap();
    let a = two_stage_gradients(&model, &batch, &text).unwrap();
    let b = end_to_end_gradients(&model, &batch).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    let worst = |x: &[Tensor<f64>], y: &[Tensor<f64>]| {
        x.iter()
            .zip(y)
            .flat_map(|(p, q)| p.data().iter().zip(q.data()).map(|(&u, &v)| relative_error(u, v)))
            .fold(0.0, f64::max)
    };
    assert!(worst(&a.phi, &b.phi) < 1e-6, "phi {}", worst(&a.phi, &b.phi));
    assert!(worst(&a.theta, &b.theta) < 1e-6, "theta {}", worst(&a.theta, &b.theta));
    assert!(a.phi.iter().any(|t| t.max_abs() > 0.0));
}

#[test]
fn zero_learning_rates_freeze_their_group() {
    let (examples, vocab) = toy_corpus(8);
    let sources: Vec<usize> = (0..2).collect();
    for (text_lr, classifier_lr) in [(0.0, 1e-3), (1e-3, 0.0)] {
        let mut t = toy_trainer(TrainConfig {
            text_lr,
            classifier_lr,
            ..toy_config(4)
        });
        let (theta0, phi0) = (t.model.classifier.params().clone(), t.model.text.params().clone());
        t.train_step(&examples, &sources, &vocab).unwrap();
        assert_eq!(t.model.text.params() == &phi0, text_lr == 0.0);
        assert_eq!(t.model.classifier.params() == &theta0, classifier_lr == 0.0);
    }
}

#[test]
fn sgd_step_follows_clipped_gradient() {
    let (examples, vocab) = toy_corpus(8);
    let batch = toy_batch(&examples, &vocab, 2);
    let mut t = toy_trainer(TrainConfig {
        optimizer: OptimizerKind::Sgd,
        clip_norm: 0.0,
        ..toy_config(4)
    });
    let text = TextPass::new(&t.model.text, &batch.keywords, true).unwrap();
    let grads = two_stage_gradients(&t.model, &batch, &text).unwrap();
    let before = t.model.classifier.params().clone();
    t.train_on_batch(&batch, &text).unwrap();
    let lr = 1e-3f32;
    for ((p0, p1), g) in before.tensors().iter().zip(t.model.classifier.params().tensors()).zip(&grads.theta) {
        for ((&a, &b), &gv) in p0.data().iter().zip(p1.data()).zip(g.data()) {
            assert_eq!(b, a - lr * gv);
        }
    }
}

#[test]
fn clipping_bounds_global_norm() {
    let mut a = vec![Tensor::<f64>::vector(vec![3.0, 0.0])];
    let mut b = vec![Tensor::<f64>::vector(vec![0.0, 4.0])];
    let norm = clip_global_norm(&mut [&mut a, &mut b], 1.0);
    assert_eq!(norm, 5.0);
    assert!((a[0].data()[0] - 0.6).abs() < 1e-15 && (b[0].data()[1] - 0.8).abs() < 1e-15);
    let mut c = vec![Tensor::<f64>::vector(vec![0.1])];
    clip_global_norm(&mut [&mut c], 1.0);
    assert_eq!(c[0].data(), &[0.1]);
}

#[test]
fn identical_seeds_give_identical_loss_streams() {
    let (examples, vocab) = toy_corpus(16);
    let cfg = TrainConfig {
        epochs: 13,
        ..toy_config(2)
    };
    let run = || {
        let mut t = toy_trainer(cfg.clone());
        t.fit(&examples, &vocab, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.len() >= 100, "{} steps", a.len());
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let (examples, vocab) = toy_corpus(8);
    let mut t = toy_trainer(toy_config(4));
    t.fit(&examples, &vocab, None).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    t.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, t.checkpoint());
    let model = loaded.model().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..32 {
        let t_len = 6 + i % 5;
        let x = crate::params::uniform::<f32>(&mut rng, &[t_len, 4], 2.0);
        let kw = &vocab.words()[i % vocab.len()];
        assert_eq!(model.probability(&x, kw).unwrap(), t.model.probability(&x, kw).unwrap());
    }
    assert!(matches!(Checkpoint::read_from(&b"NOTACKPT........"[..]), Err(CheckpointError::BadMagic)));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (examples, vocab) = toy_corpus(12);
    let cfg = TrainConfig {
        epochs: 3,
        ..toy_config(4)
    };
    let full_dir = tempdir().unwrap();
    let mut full = toy_trainer(cfg.clone());
    let full_records = full.fit(&examples, &vocab, Some(full_dir.path())).unwrap();

    let part_dir = tempdir().unwrap();
    let mut first = toy_trainer(TrainConfig { epochs: 1, ..cfg.clone() });
    first.fit(&examples, &vocab, Some(part_dir.path())).unwrap();
    let ckpt = Checkpoint::load(part_dir.path().join("checkpoint_epoch001.ckpt")).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ckpt, Some(cfg)).unwrap();
    let rest = resumed.fit(&examples, &vocab, Some(part_dir.path())).unwrap();
    let per_epoch = full_records.len() / 3;
    assert_eq!(rest, full_records[per_epoch..]);
    assert_eq!(
        fs::read_to_string(full_dir.path().join(LOSS_CSV)).unwrap(),
        fs::read_to_string(part_dir.path().join(LOSS_CSV)).unwrap()
    );
}

#[test]
fn zero_epochs_keep_initialization() {
    let (examples, vocab) = toy_corpus(8);
    let dir = tempdir().unwrap();
    let mut t = toy_trainer(TrainConfig { epochs: 0, ..toy_config(4) });
    let init = t.checkpoint();
    assert!(t.fit(&examples, &vocab, Some(dir.path())).unwrap().is_empty());
    let saved = Checkpoint::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(saved.theta, init.theta);
    assert_eq!(saved.phi, init.phi);
}

#[test]
fn too_few_examples_is_an_error() {
    let (examples, vocab) = toy_corpus(3);
    let mut t = toy_trainer(toy_config(8));
    assert!(matches!(
        t.fit(&examples, &vocab, None),
        Err(TrainError::Data(DataError::NotEnoughExamples { needed: 4, available: 3 }))
    ));
}
