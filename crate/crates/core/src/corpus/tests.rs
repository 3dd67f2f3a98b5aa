use proptest::prelude::*;

use super::*;
use crate::signal::{estimate_f0, write_wav, AudioBuffer, WavFormat};

fn small_features() -> FeatureConfig {
    FeatureConfig {
        sample_rate: 8000,
        n_fft: 256,
        hop_length: 64,
        n_mels: 20,
        log_floor: 1e-5,
    }
}

/// Writes a WAV whose mel has exactly `frames` frames.
fn wav_with_frames(dir: &Path, name: &str, frames: usize, cfg: &FeatureConfig) {
    let n = cfg.samples_for(frames);
    let s = (0..n).map(|i| 0.3 * (i as f64 * 0.2).sin()).collect();
    write_wav(dir.join(name), &AudioBuffer::new(s, cfg.sample_rate).unwrap(), WavFormat::Float32).unwrap();
}

fn record(audio: &str, speaker: &str, phones: &str, durations: Vec<usize>) -> ManifestRecord {
    ManifestRecord {
        id: None,
        audio: audio.into(),
        speaker: speaker.into(),
        phones: phones.into(),
        durations,
        text: None,
    }
}

#[test]
fn vocab_reserves_pad_and_round_trips() {
    let mut v = PhonemeVocab::new();
    assert_eq!(v.id(PAD_SYMBOL), Some(PAD));
    assert_eq!(v.insert("a"), 1);
    assert_eq!(v.insert("b"), 2);
    assert_eq!(v.insert("a"), 1);
    let json = serde_json::to_string(&v).unwrap();
    assert_eq!(json, r#"["<pad>","a","b"]"#);
    let back: PhonemeVocab = serde_json::from_str(&json).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.id("b"), Some(2));
    assert!(serde_json::from_str::<PhonemeVocab>(r#"["a","<pad>"]"#).is_err());
    assert!(serde_json::from_str::<PhonemeVocab>(r#"["<pad>","a","a"]"#).is_err());
}

#[test]
fn reconcile_examples() {
    assert_eq!(reconcile_durations(&[5, 5, 5], 15, 2).unwrap(), vec![5, 5, 5]);
    assert_eq!(reconcile_durations(&[5, 5, 5], 16, 2).unwrap(), vec![5, 5, 6]);
    assert_eq!(reconcile_durations(&[5, 5, 1], 13, 2).unwrap(), vec![5, 5, 3]);
    assert!(matches!(
        reconcile_durations(&[5, 5, 1], 9, 2),
        Err(Error::DurationMismatch { sum: 11, frames: 9, tolerance: 2 })
    ));
    assert!(reconcile_durations(&[5, 5, 5], 12, 2).is_err());
    assert!(reconcile_durations(&[5, 5, 5], 12, 0).is_err());
}

#[test]
fn manifest_assigns_speakers_in_first_appearance_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_features();
    wav_with_frames(dir.path(), "a.wav", 6, &cfg);
    let recs: Vec<_> = ["carol", "alice", "carol", "bob", "dave", "alice"]
        .iter()
        .map(|s| record("a.wav", s, "x y", vec![3, 3]))
        .collect();
    let path = dir.path().join("m.jsonl");
    write_manifest(&path, &recs).unwrap();
    let m = parse_manifest(&path, None).unwrap();
    assert_eq!(m.speakers, vec!["carol", "alice", "bob", "dave"]);
    let ids: Vec<usize> = m.records.iter().map(|r| r.speaker_id).collect();
    assert_eq!(ids, vec![0, 1, 0, 2, 3, 1]);
    assert_eq!(m.vocab.symbols(), &["<pad>", "x", "y"]);
    assert_eq!(m.records[0].phonemes, vec![1, 2]);
}

#[test]
fn manifest_record_errors_name_index_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_features();
    wav_with_frames(dir.path(), "a.wav", 6, &cfg);
    let path = dir.path().join("m.jsonl");

    write_manifest(&path, &[record("a.wav", "s", "x", vec![6]), record("missing.wav", "s", "x", vec![6])]).unwrap();
    let err = parse_manifest(&path, None).unwrap_err();
    assert!(matches!(err, Error::Record { index: 1, field: "audio", .. }), "{err}");

    let mut vocab = PhonemeVocab::new();
    vocab.insert("x");
    write_manifest(&path, &[record("a.wav", "s", "x q", vec![3, 3])]).unwrap();
    let err = parse_manifest(&path, Some(&vocab)).unwrap_err();
    assert!(matches!(err, Error::Record { index: 0, field: "phones", .. }), "{err}");
    assert!(err.to_string().contains("`q`"));

    write_manifest(&path, &[record("a.wav", "s", "x x", vec![3])]).unwrap();
    let err = parse_manifest(&path, None).unwrap_err();
    assert!(matches!(err, Error::Record { field: "durations", .. }), "{err}");
}

#[test]
fn durations_are_checked_against_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_features();
    wav_with_frames(dir.path(), "a.wav", 12, &cfg);
    let path = dir.path().join("m.jsonl");
    write_manifest(&path, &[record("a.wav", "s", "x y", vec![6, 6]), record("a.wav", "s", "x y", vec![4, 5])]).unwrap();
    let m = parse_manifest(&path, None).unwrap();
    let ok = load_utterance(&m.records[0], &cfg, None, 0).unwrap();
    assert_eq!(ok.durations, vec![6, 6]);
    ok.validate(m.vocab.len()).unwrap();
    let err = load_utterance(&m.records[1], &cfg, None, 0).unwrap_err();
    assert!(matches!(err, Error::Record { index: 1, field: "durations", .. }), "{err}");
    let fixed = load_utterance(&m.records[1], &cfg, None, 3).unwrap();
    assert_eq!(fixed.durations, vec![4, 8]);
}

#[test]
fn cache_hit_matches_fresh_features() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_features();
    wav_with_frames(dir.path(), "a.wav", 9, &cfg);
    let audio = dir.path().join("a.wav");
    let cache = FeatureCache::new(dir.path().join("cache")).unwrap();
    let first = cache.get_or_compute(&audio, &cfg).unwrap();
    let entries: Vec<_> = std::fs::read_dir(cache.dir()).unwrap().collect();
    assert_eq!(entries.len(), 1);
    let second = cache.get_or_compute(&audio, &cfg).unwrap();
    assert_eq!(first, second);

    let other = FeatureConfig {
        log_floor: 1e-4,
        ..cfg.clone()
    };
    let bytes = std::fs::read(&audio).unwrap();
    assert_ne!(FeatureCache::key(&bytes, &cfg).unwrap(), FeatureCache::key(&bytes, &other).unwrap());

    let entry = cache.entry_path(&FeatureCache::key(&bytes, &cfg).unwrap());
    let full = std::fs::read(&entry).unwrap();
    std::fs::write(&entry, &full[..full.len() - 3]).unwrap();
    assert!(matches!(cache.get_or_compute(&audio, &cfg), Err(Error::Decode { .. })));
}

#[test]
fn read_only_cache_never_writes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_features();
    wav_with_frames(dir.path(), "a.wav", 9, &cfg);
    let audio = dir.path().join("a.wav");
    let ro = FeatureCache::read_only(dir.path().join("cache"));
    let cold = ro.get_or_compute(&audio, &cfg).unwrap();
    assert!(!dir.path().join("cache").exists());
    let rw = FeatureCache::new(dir.path().join("cache")).unwrap();
    assert_eq!(rw.get_or_compute(&audio, &cfg).unwrap(), cold);
    assert_eq!(ro.get_or_compute(&audio, &cfg).unwrap(), cold);
    assert_eq!(std::fs::read_dir(rw.dir()).unwrap().count(), 1);
}

fn utt(id: &str, n: usize, frames_each: usize, bands: usize, speaker: usize) -> Utterance {
    let cfg = FeatureConfig {
        n_mels: bands,
        ..FeatureConfig::default()
    };
    let t = n * frames_each;
    Utterance {
        id: id.into(),
        speaker_id: speaker,
        phonemes: (0..n).map(|i| 1 + i % 5).collect(),
        durations: vec![frames_each; n],
        mel: MelSpectrogram::new((0..t * bands).map(|i| i as f64 * 0.01 - 3.0).collect(), t, bands, &cfg).unwrap(),
        transcript: Some(format!("t {id}")),
    }
}

#[test]
fn single_utterance_batch_has_no_padding() {
    let u = utt("a", 4, 3, 5, 1);
    let b = make_batch(&[&u], None).unwrap();
    assert!(b.phone_mask.iter().all(|&m| m));
    assert!(b.frame_mask.iter().all(|&m| m));
    assert_eq!((b.n_max, b.t_max), (4, 12));
}

#[test]
fn padding_masks_and_zero_cells() {
    let (a, c) = (utt("a", 3, 2, 4, 0), utt("c", 5, 2, 4, 1));
    let b = make_batch(&[&a, &c], None).unwrap();
    assert_eq!(b.n_max, 5);
    assert_eq!(&b.phone_mask[..5], &[true, true, true, false, false]);
    assert_eq!(&b.phonemes[3..5], &[PAD, PAD]);
    assert_eq!(&b.durations[3..5], &[0, 0]);
    assert!(b.mel[6 * 4..10 * 4].iter().all(|&v| v == 0.0));
    let padded = make_batch(&[&a], Some((8, 20))).unwrap();
    assert_eq!((padded.n_max, padded.t_max), (8, 20));
    assert!(make_batch(&[], None).is_err());
}

#[test]
fn synthetic_durations_match_frames_exactly() {
    let spec = SynthSpec {
        speakers: 1,
        utterances: 1,
        f0_ranges: vec![[120.0, 180.0]],
        phones_per_utterance: [3, 3],
        ..SynthSpec::default()
    };
    let c = synth_corpus(&spec, &FeatureConfig::default()).unwrap();
    let u = &c.corpus.utterances[0];
    assert_eq!(u.len(), 3);
    assert_eq!(u.durations.iter().sum::<usize>(), u.frames());
    u.validate(c.corpus.vocab.len()).unwrap();
}

#[test]
fn synthetic_speakers_separate_by_pitch() {
    let spec = SynthSpec {
        utterances: 6,
        ..SynthSpec::default()
    };
    let c = synth_corpus(&spec, &FeatureConfig::default()).unwrap();
    let mut means = [Vec::new(), Vec::new()];
    for (u, a) in c.corpus.utterances.iter().zip(&c.audio) {
        let f = estimate_f0(a, 50.0, 600.0).unwrap().mean_voiced_f0().unwrap();
        means[u.speaker_id].push(f);
    }
    let max0 = means[0].iter().copied().fold(f64::MIN, f64::max);
    let min1 = means[1].iter().copied().fold(f64::MAX, f64::min);
    assert!(max0 < 160.0 && min1 > 190.0, "{means:?}");
}

#[test]
fn synthetic_segments_carry_their_pitch() {
    let spec = SynthSpec {
        utterances: 2,
        frames_per_phone: [8, 8],
        ..SynthSpec::default()
    };
    let c = synth_corpus(&spec, &FeatureConfig::default()).unwrap();
    for (k, a) in c.audio.iter().enumerate() {
        let contour = estimate_f0(a, 50.0, 600.0).unwrap();
        for (s, &f0) in c.segment_f0[k].iter().enumerate() {
            let mid = s * 8 + 4;
            let got = contour.f0[mid.min(contour.len() - 1)];
            assert!((got - f0).abs() / f0 < 0.05, "utt {k} seg {s}: {got} vs {f0}");
        }
    }
}

#[test]
fn synthetic_corpus_is_seed_deterministic() {
    let spec = SynthSpec {
        utterances: 3,
        ..SynthSpec::default()
    };
    let f = FeatureConfig::default();
    let (a, b) = (synth_corpus(&spec, &f).unwrap(), synth_corpus(&spec, &f).unwrap());
    assert_eq!(a.corpus, b.corpus);
    assert_eq!(a.audio, b.audio);
    let c = synth_corpus(&SynthSpec { seed: 1, ..spec }, &f).unwrap();
    assert_ne!(a.audio, c.audio);
}

#[test]
fn written_synthetic_corpus_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        utterances: 4,
        ..SynthSpec::default()
    };
    let f = FeatureConfig::default();
    let c = synth_corpus(&spec, &f).unwrap();
    let manifest = c.write(dir.path()).unwrap();
    let loaded = load_corpus(&manifest, &f, None, None, 0).unwrap();
    assert_eq!(loaded.speakers, c.corpus.speakers);
    for (x, y) in loaded.utterances.iter().zip(&c.corpus.utterances) {
        assert_eq!((&x.id, x.speaker_id, &x.durations), (&y.id, y.speaker_id, &y.durations));
        assert_eq!(loaded.vocab.symbol(x.phonemes[0]), c.corpus.vocab.symbol(y.phonemes[0]));
        assert_eq!(x.frames(), y.frames());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn batch_round_trip(lens in proptest::collection::vec((1usize..7, 1usize..4, 0usize..3), 1..6)) {
        let utts: Vec<Utterance> = lens
            .iter()
            .enumerate()
            .map(|(i, &(n, f, s))| utt(&format!("u{i}"), n, f, 3, s))
            .collect();
        let refs: Vec<&Utterance> = utts.iter().collect();
        let b = make_batch(&refs, None).unwrap();
        prop_assert_eq!(b.phone_mask.iter().filter(|&&m| m).count(), utts.iter().map(|u| u.len()).sum::<usize>());
        for (i, u) in utts.iter().enumerate() {
            prop_assert!(b.phonemes[i * b.n_max + u.len()..(i + 1) * b.n_max].iter().all(|&p| p == PAD));
        }
        prop_assert_eq!(unbatch(&b).unwrap(), utts);
    }
}
