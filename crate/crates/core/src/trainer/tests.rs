use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check_inputs;
use crate::corpus::PhonemeVocab;
use crate::model::ModelConfig;
use crate::signal::{FeatureConfig, MelSpectrogram};

const BANDS: usize = 6;

fn features() -> FeatureConfig {
    FeatureConfig {
        n_mels: BANDS,
        ..FeatureConfig::default()
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        model_dim: 16,
        layers: 1,
        heads: 2,
        conv_kernel: 3,
        ffn_mult: 2,
        levels: 2,
        codes: 8,
        code_dim: 3,
        mel_bands: BANDS,
        ..ModelConfig::default()
    }
}

fn model(seed: u64) -> CodecModel<f64> {
    let mut vocab = PhonemeVocab::new();
    for i in 1..=5 {
        vocab.insert(&format!("p{i}"));
    }
    CodecModel::new(tiny_config(), features(), vocab, vec!["a".into(), "b".into()], seed).unwrap()
}

/// Piecewise-constant mel: each phoneme segment has its own level and tilt.
fn utterance(id: usize, seed: u64) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..7);
    let phonemes: Vec<usize> = (0..n).map(|_| rng.random_range(1..6)).collect();
    let durations: Vec<usize> = (0..n).map(|_| rng.random_range(1..5)).collect();
    let speaker = id % 2;
    let mut vals = Vec::new();
    for (&p, &d) in phonemes.iter().zip(&durations) {
        let level = -4.0 + p as f64 * 0.5 + speaker as f64 + rng.random_range(-1.0..1.0);
        let tilt = rng.random_range(-0.3..0.3);
        for _ in 0..d {
            vals.extend((0..BANDS).map(|k| level + tilt * k as f64));
        }
    }
    let frames: usize = durations.iter().sum();
    Utterance {
        id: format!("u{id}"),
        speaker_id: speaker,
        phonemes,
        durations,
        mel: MelSpectrogram::new(vals, frames, BANDS, &features()).unwrap(),
        transcript: None,
    }
}

fn corpus(n: usize) -> Vec<Utterance> {
    (0..n).map(|i| utterance(i, 100 + i as u64)).collect()
}

fn config() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        warmup_steps: 10,
        batch_size: 4,
        max_steps: 1000,
        reinit_every: 5,
        ..TrainConfig::default()
    }
}

fn state(train: &[Utterance]) -> TrainState<f64> {
    TrainState::new(model(7), config(), train).unwrap()
}

fn output_with_pred(g: &Graph<f64>, batch: &Batch, values: Vec<f64>) -> ForwardOutput<f64> {
    ForwardOutput {
        pred: g.constant(Tensor::new(vec![batch.size(), batch.t_max, batch.bands], values).unwrap()),
        commitment: None,
        codes: None,
        level_inputs: Vec::new(),
        latent: Vec::new(),
    }
}

fn parts(g: &Graph<f64>, lv: &LossVars) -> (f64, f64) {
    (g.value(lv.l1).data()[0], g.value(lv.l2).data()[0])
}

#[test]
fn loss_of_exact_and_offset_predictions() {
    let utts = corpus(3);
    let batch = make_batch(&utts.iter().collect::<Vec<_>>(), None).unwrap();
    let g = Graph::new();
    let exact = output_with_pred(&g, &batch, batch.mel.clone());
    let lv = loss_graph(&g, &batch, &exact, 0.25).unwrap();
    assert_eq!(parts(&g, &lv), (0.0, 0.0));

    // Padded cells of the prediction are arbitrary and must not count.
    let shifted: Vec<f64> = batch
        .mel
        .iter()
        .enumerate()
        .map(|(i, v)| if batch.frame_mask[i / BANDS] { v + 1.0 } else { 123.0 })
        .collect();
    let out = output_with_pred(&g, &batch, shifted);
    let lv = loss_graph(&g, &batch, &out, 0.25).unwrap();
    let (l1, l2) = parts(&g, &lv);
    assert!((l1 - 1.0).abs() < 1e-12 && (l2 - 1.0).abs() < 1e-12);
    assert_eq!(g.value(lv.total).data()[0], l1 + l2);
}

#[test]
fn padded_region_does_not_affect_loss() {
    let utts = corpus(4);
    let refs: Vec<&Utterance> = utts.iter().collect();
    let m = model(3);
    let mut batch = make_batch(&refs, Some((9, 30))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (i, v) in batch.mel.iter_mut().enumerate() {
        if !batch.frame_mask[i / BANDS] {
            *v = rng.random_range(-5.0..5.0);
        }
    }
    let base = compute_loss(&m, &batch, 0.25).unwrap();
    for (i, v) in batch.mel.iter_mut().enumerate() {
        if !batch.frame_mask[i / BANDS] {
            *v *= 2.0;
        }
    }
    assert_eq!(compute_loss(&m, &batch, 0.25).unwrap(), base);
    let (total, p) = base;
    assert!(p.l1 >= 0.0 && p.l2 >= 0.0 && p.commitment >= 0.0);
    assert_eq!(total, p.total(0.25));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let utts = corpus(2);
    let batch = make_batch(&utts.iter().collect::<Vec<_>>(), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pred = Tensor::from_fn(vec![batch.size(), batch.t_max, BANDS], |_| rng.random_range(-6.0..0.0));
    let report = grad_check_inputs(
        |g, v| {
            let out = ForwardOutput {
                pred: v[0],
                commitment: None,
                codes: None,
                level_inputs: Vec::new(),
                latent: Vec::new(),
            };
            Ok(loss_graph(g, &batch, &out, 0.25)?.total)
        },
        &[pred],
        None,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
}

#[test]
fn zero_learning_rate_moves_only_codebooks() {
    let utts = corpus(4);
    let mut s = state(&utts);
    s.config.learning_rate = 0.0;
    let batch = make_batch(&utts.iter().collect::<Vec<_>>(), None).unwrap();
    s.train_step(&batch).unwrap();
    let params = s.model.params.clone();
    let books = s.model.rvq.clone().unwrap();
    let rec = s.train_step(&batch).unwrap();
    assert!(rec.skipped.is_none());
    assert_eq!(s.model.params, params);
    let after = s.model.rvq.as_ref().unwrap();
    assert_ne!(after.levels[0].ema_count, books.levels[0].ema_count);
    assert_eq!(s.step, 2);
}

#[test]
fn numeric_failure_skips_step() {
    let utts = corpus(4);
    let mut s = state(&utts);
    let batch = make_batch(&utts.iter().collect::<Vec<_>>(), None).unwrap();
    s.train_step(&batch).unwrap();
    let params = s.model.params.clone();
    let books = s.model.rvq.clone();
    let adam_step = s.adam.step;
    s.model.mel_scale = f64::NAN;
    let rec = s.train_step(&batch).unwrap();
    let msg = rec.skipped.expect("step should be skipped");
    assert!(msg.contains("u0"), "{msg}");
    assert_eq!(s.step, 2);
    assert_eq!(s.adam.step, adam_step);
    assert_eq!(s.model.params, params);
    assert_eq!(s.model.rvq, books);
    s.model.mel_scale = 1.0;
    assert!(compute_loss(&s.model, &batch, 0.25).is_ok());
}

fn run(s: &mut TrainState<f64>, utts: &[Utterance], steps: u64) -> Vec<String> {
    let mut log = Vec::new();
    run_training(
        s,
        utts,
        LoopIo {
            log: Some(&mut log),
            step_limit: Some(steps),
            ..Default::default()
        },
    )
    .unwrap();
    String::from_utf8(log).unwrap().lines().map(String::from).collect()
}

#[test]
fn same_seed_gives_identical_log() {
    let utts = corpus(6);
    let a = run(&mut state(&utts), &utts, 8);
    let b = run(&mut state(&utts), &utts, 8);
    assert_eq!(a.len(), 8);
    assert_eq!(a, b);
    let mut rest = a[0].as_str();
    for key in ["step", "l1", "l2", "commit", "usage_l1", "usage_l2"] {
        let at = rest.find(&format!("\"{key}\":")).unwrap_or_else(|| panic!("{key} missing in {}", a[0]));
        rest = &rest[at..];
    }
    assert!(!a[0].contains("skipped"));
}

#[test]
fn resume_continues_identically() {
    let utts = corpus(6);
    let mut full = state(&utts);
    let whole = run(&mut full, &utts, 10);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.ckpt");
    let mut first = state(&utts);
    let mut head = run(&mut first, &utts, 4);
    save_checkpoint(&first, &path).unwrap();
    let mut resumed: TrainState<f64> = load_checkpoint(&path).unwrap();
    assert_eq!(resumed.step, 4);
    head.extend(run(&mut resumed, &utts, 6));
    assert_eq!(head, whole);
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.model.rvq, full.model.rvq);
    assert_eq!(resumed.adam, full.adam);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn model_checkpoint_is_not_a_training_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model(1).save(&path).unwrap();
    let err = load_checkpoint::<f64>(&path).unwrap_err();
    assert!(err.to_string().contains("train"), "{err}");
    // A training checkpoint still loads as a plain model.
    let utts = corpus(2);
    let s = state(&utts);
    save_checkpoint(&s, &path).unwrap();
    assert_eq!(CodecModel::<f64>::load(&path).unwrap(), s.model);
}

#[test]
fn overfits_a_fixed_batch_and_level_ablation_costs_psnr() {
    let utts = corpus(4);
    let mut s = state(&utts);
    s.config.reinit_every = 20;
    let batch = make_batch(&utts.iter().collect::<Vec<_>>(), None).unwrap();
    let initial = compute_loss(&s.model, &batch, s.config.beta).unwrap().0;
    for _ in 0..400 {
        let rec = s.train_step(&batch).unwrap();
        assert!(rec.skipped.is_none());
    }
    let fin = compute_loss(&s.model, &batch, s.config.beta).unwrap().0;
    assert!(fin < 0.1 * initial, "initial {initial}, final {fin}");

    let opts = EvalOptions {
        batch_size: 4,
        ..Default::default()
    };
    let full = evaluate(&s.model, &utts, &opts).unwrap();
    let level1 = evaluate(
        &s.model,
        &utts,
        &EvalOptions {
            keep_levels: Some(1),
            ..opts.clone()
        },
    )
    .unwrap();
    assert!(level1.mean_psnr <= full.mean_psnr, "{} vs {}", level1.mean_psnr, full.mean_psnr);
    assert_eq!(full.per_utterance.len(), 4);
}

#[test]
fn evaluation_is_read_only_and_rejects_empty_sets() {
    let utts = corpus(3);
    let s = state(&utts);
    let before = s.model.clone();
    let r = evaluate(&s.model, &utts, &EvalOptions::default()).unwrap();
    assert!(r.mean_l1.is_finite() && r.mean_psnr.is_finite());
    assert_eq!(s.model, before);
    assert!(matches!(evaluate(&s.model, &[], &EvalOptions::default()), Err(Error::Contract(_))));
}

#[test]
fn config_validation_and_unknown_keys() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().unwrap_err().to_string().contains("train.batch_size"));
    let bad = TrainConfig {
        ema_decay: 1.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rat": 0.1}"#).is_err());
    let c: TrainConfig = serde_json::from_str(r#"{"seed": 4}"#).unwrap();
    assert_eq!(c.seed, 4);
    assert_eq!(c.batch_size, 8);
}

#[test]
fn warmup_is_linear() {
    let c = TrainConfig {
        learning_rate: 1.0,
        warmup_steps: 4,
        ..TrainConfig::default()
    };
    let lrs: Vec<f64> = (0..6).map(|s| c.lr_at(s)).collect();
    assert_eq!(lrs, [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
}
