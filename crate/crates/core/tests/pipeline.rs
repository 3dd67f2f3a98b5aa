use prosody_core::corpus::{load_corpus, synth_corpus, FeatureCache, SynthSpec};
use prosody_core::model::{CodecModel, ModelConfig, ReconstructOptions};
use prosody_core::signal::FeatureConfig;
use prosody_core::trainer::{load_checkpoint, run_training, LoopIo, TrainConfig, TrainState};
use prosody_core::{CodecModelF32, Scalar, TrainStateF64};

fn features() -> FeatureConfig {
    FeatureConfig {
        n_mels: 20,
        ..FeatureConfig::default()
    }
}

fn spec() -> SynthSpec {
    SynthSpec {
        utterances: 6,
        phones_per_utterance: [3, 4],
        frames_per_phone: [2, 3],
        ..SynthSpec::default()
    }
}

fn model_config() -> ModelConfig {
    ModelConfig {
        model_dim: 16,
        layers: 1,
        heads: 2,
        conv_kernel: 3,
        codes: 8,
        mel_bands: 20,
        ..ModelConfig::default()
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        max_steps: 12,
        warmup_steps: 4,
        batch_size: 3,
        checkpoint_every: 5,
        eval_every: 6,
        reference_step: 4,
        ..TrainConfig::default()
    }
}

fn trained<T: Scalar>(dir: &std::path::Path) -> (TrainState<T>, Vec<u8>, prosody_core::trainer::TrainOutcome) {
    let manifest = synth_corpus(&spec(), &features()).unwrap().write(&dir.join("data")).unwrap();
    let cache = FeatureCache::new(dir.join("cache")).unwrap();
    let corpus = load_corpus(&manifest, &features(), Some(&cache), None, 0).unwrap();
    assert_eq!(corpus.utterances.len(), 6);
    let model = CodecModel::<T>::new(model_config(), features(), corpus.vocab, corpus.speakers, 3).unwrap();
    let mut state = TrainState::new(model, train_config(), &corpus.utterances).unwrap();
    let mut log = Vec::new();
    let ckpt = dir.join("model.ckpt");
    let outcome = run_training(
        &mut state,
        &corpus.utterances,
        LoopIo {
            log: Some(&mut log),
            checkpoint: Some(&ckpt),
            eval_set: Some(&corpus.utterances[..2]),
            step_limit: None,
        },
    )
    .unwrap();
    (state, log, outcome)
}

#[test]
fn synth_to_checkpoint_round_trip_in_f64() {
    let dir = tempfile::tempdir().unwrap();
    let (state, log, outcome): (TrainStateF64, _, _) = trained(dir.path());
    assert_eq!(outcome.steps_run, 12);
    assert_eq!(outcome.skipped, 0);
    assert_eq!(outcome.evals.len(), 2);
    assert!(outcome.reference_loss.is_some_and(f64::is_finite));
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 12);

    let loaded: TrainStateF64 = load_checkpoint(&dir.path().join("model.ckpt")).unwrap();
    assert_eq!(loaded.step, 12);
    assert_eq!(loaded.model, state.model);

    let corpus = load_corpus(
        dir.path().join("data/manifest.jsonl"),
        &features(),
        Some(&FeatureCache::read_only(dir.path().join("cache"))),
        Some(&loaded.model.vocab),
        0,
    )
    .unwrap();
    for u in &corpus.utterances {
        let codes = loaded.model.encode_utterance(u).unwrap();
        assert_eq!(codes.len(), u.len());
        assert_eq!(codes.depth(), 2);
        let mel = loaded.model.reconstruct(u, &ReconstructOptions::default()).unwrap();
        assert_eq!(mel.frames(), u.mel.frames());
    }
}

#[test]
fn single_precision_pipeline_runs_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let (state, _, outcome) = trained::<f32>(dir.path());
    assert!(outcome.final_loss.is_some_and(f64::is_finite));
    let model = CodecModelF32::load(dir.path().join("model.ckpt")).unwrap();
    assert_eq!(model, state.model);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (sa, la, _) = trained::<f64>(a.path());
    let (sb, lb, _) = trained::<f64>(b.path());
    assert_eq!(la, lb);
    assert_eq!(sa.model, sb.model);
    assert_eq!(
        std::fs::read(a.path().join("model.ckpt")).unwrap(),
        std::fs::read(b.path().join("model.ckpt")).unwrap()
    );
}
