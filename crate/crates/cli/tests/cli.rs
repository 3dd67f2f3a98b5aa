use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use prosody_cli::{load_config, run, RunConfig, EXIT_DATA, EXIT_OK, EXIT_USAGE};

/// Small enough that the whole pipeline runs in seconds.
const TINY: &str = r#"{
  "precision": "f64",
  "synth": { "utterances": 8, "phones_per_utterance": [3, 5], "frames_per_phone": [2, 4] },
  "model": { "model_dim": 16, "layers": 1, "heads": 2, "conv_kernel": 3, "codes": 8, "levels": 2 },
  "train": { "max_steps": 300, "warmup_steps": 10, "reinit_every": 20, "batch_size": 4, "eval_every": 10, "checkpoint_every": 10, "reference_step": 10 },
  "analysis": { "extraction_fraction": 1.0, "n_points": 3, "corridor": 3.0, "probe": { "griffin_lim_iters": 4 } }
}
"#;

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn cli(config: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["prosody".to_string(), "-c".into(), config.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run(argv)
}

/// Synthetic data plus a trained tiny model, shared by the read-only tests.
fn trained() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = scratch("trained");
        let cfg = dir.join("prosody.json");
        std::fs::write(&cfg, TINY).unwrap();
        assert_eq!(cli(&cfg, &["synth-data"]), EXIT_OK);
        assert_eq!(cli(&cfg, &["train"]), EXIT_OK);
        dir
    })
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn json(p: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&read(p)).unwrap()
}

#[test]
fn pipeline_smoke_writes_usage_report() {
    let dir = trained();
    let cfg = dir.join("prosody.json");
    assert_eq!(cli(&cfg, &["analyze", "usage", "--out", dir.join("usage").to_str().unwrap()]), EXIT_OK);
    let usage = json(dir.join("usage/usage.json"));
    let levels = usage["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 2);
    for l in levels {
        let u = l["usage"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&u), "{u}");
    }
    let train = json(dir.join("reports/train.json"));
    assert_eq!(train["step"], 300);
    assert_eq!(read(dir.join("reports/train_log.jsonl")).lines().count(), 300);
}

#[test]
fn every_command_runs_on_the_tiny_model() {
    let dir = trained();
    let cfg = dir.join("prosody.json");
    let out = dir.join("all");
    let o = |s: &str| out.join(s).display().to_string();
    assert_eq!(cli(&cfg, &["resynth", "--wav", "--out", &o("resynth")]), EXIT_OK);
    assert!(out.join("resynth/synth0000.json").is_file());
    assert!(out.join("resynth/synth0000.wav").is_file());
    assert_eq!(cli(&cfg, &["cross-resynth", "--target-speaker", "1", "--out", &o("cross")]), EXIT_OK);
    assert_ne!(read(out.join("cross/synth0000.json")), read(out.join("resynth/synth0000.json")));
    for t in ["entropy", "klmap", "pca", "probes", "speaker-relative"] {
        assert_eq!(cli(&cfg, &["analyze", t, "--out", &o("analysis")]), EXIT_OK, "analyze {t}");
    }
    for f in ["entropy.json", "klmap.svg", "pca.json", "probes.csv", "speaker_relative.json"] {
        assert!(out.join("analysis").join(f).is_file(), "{f}");
    }
    for t in ["reconstruction", "levels", "table8"] {
        assert_eq!(cli(&cfg, &["metrics", "--task", t, "--out", &o("metrics")]), EXIT_OK, "metrics {t}");
    }
    let levels = read(out.join("metrics/levels.csv"));
    assert_eq!(levels.lines().count(), 3);
    // Without an analysis manifest the analysis set is the extraction subset.
    let args = ["metrics", "--task", "reconstruction", "--set", "analysis", "--out", &o("metrics_analysis")];
    assert_eq!(cli(&cfg, &args), EXIT_OK);
    assert_eq!(
        read(out.join("metrics_analysis/reconstruction.csv")),
        read(out.join("metrics/reconstruction.csv"))
    );
    assert_eq!(cli(&cfg, &["metrics", "--task", "intelligibility"]), EXIT_USAGE);
}

#[test]
fn intelligibility_and_similarity_reports() {
    let dir = trained();
    let cfg = dir.join("prosody.json");
    let m: Vec<serde_json::Value> = read(dir.join("data/manifest.jsonl"))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let hyp: serde_json::Map<String, serde_json::Value> = m
        .iter()
        .map(|r| (r["id"].as_str().unwrap().to_string(), r["text"].clone()))
        .collect();
    let hyp_path = dir.join("hyp.json");
    std::fs::write(&hyp_path, serde_json::to_string(&hyp).unwrap()).unwrap();
    let out = dir.join("intel");
    let code = cli(
        &cfg,
        &["metrics", "--task", "intelligibility", "--hyp-transcripts", hyp_path.to_str().unwrap(), "--out", out.to_str().unwrap()],
    );
    assert_eq!(code, EXIT_OK);
    let r = json(out.join("intelligibility.json"));
    assert_eq!(r["mean"]["wer"], 0.0);
    assert_eq!(r["mean"]["cer"], 0.0);

    let emb = dir.join("emb.json");
    std::fs::write(&emb, r#"[{"id":"a","reference":[1,0],"hypothesis":[1,0]},{"id":"b","reference":[1,0],"hypothesis":[0,1]}]"#).unwrap();
    let code = cli(&cfg, &["metrics", "--task", "similarity", "--embeddings", emb.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(json(out.join("similarity.json"))["mean"], 0.5);
}

fn phone_counts(dir: &Path) -> Vec<(String, usize)> {
    read(dir.join("data/manifest.jsonl"))
        .lines()
        .map(|l| {
            let r: serde_json::Value = serde_json::from_str(l).unwrap();
            (r["id"].as_str().unwrap().to_string(), r["phones"].as_str().unwrap().split_whitespace().count())
        })
        .collect()
}

#[test]
fn transfer_requires_equal_phoneme_counts() {
    let dir = trained();
    let counts = phone_counts(dir);
    let (a, na) = &counts[0];
    let (b, nb) = counts.iter().find(|(_, n)| n != na).expect("synthetic lengths vary");
    let out = Command::new(env!("CARGO_BIN_EXE_prosody"))
        .args(["-c", dir.join("prosody.json").to_str().unwrap(), "transfer", "--source", a, "--target", b])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("has {na} phonemes")) && err.contains(&format!("has {nb}")), "{err}");

    if let Some((c, _)) = counts.iter().skip(1).find(|(_, n)| n == na) {
        let o = dir.join("transfer");
        let code = cli(&dir.join("prosody.json"), &["transfer", "--source", a, "--target", c, "--out", o.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        assert!(o.join(format!("{a}_to_{c}.json")).is_file());
    }
}

#[test]
fn shuffle_codes_is_deterministic_per_seed() {
    let dir = trained();
    let cfg = dir.join("prosody.json");
    let out = |s: &str| dir.join("shuffle").join(s).display().to_string();
    for run_name in ["a", "b"] {
        assert_eq!(cli(&cfg, &["shuffle-codes", "--seed", "7", "--set", "all", "--out", &out(run_name)]), EXIT_OK);
    }
    assert_eq!(cli(&cfg, &["shuffle-codes", "--seed", "8", "--set", "all", "--out", &out("c")]), EXIT_OK);
    let files: Vec<_> = std::fs::read_dir(out("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(files.len() > 1);
    for f in &files {
        assert_eq!(read(Path::new(&out("a")).join(f)), read(Path::new(&out("b")).join(f)), "{f:?}");
    }
    assert_ne!(
        read(Path::new(&out("a")).join("permutations.json")),
        read(Path::new(&out("c")).join("permutations.json"))
    );
}

#[test]
fn minimal_config_gets_documented_defaults() {
    let dir = scratch("minimal");
    let path = dir.join("c.json");
    std::fs::write(&path, r#"{"paths": {"reports": "out", "checkpoint": "m.ckpt"}}"#).unwrap();
    let cfg = load_config(&path).unwrap();
    let expected = RunConfig::default();
    assert_eq!(cfg.model, expected.model);
    assert_eq!(cfg.train, expected.train);
    assert_eq!(cfg.features, expected.features);
    assert_eq!(cfg.analysis, expected.analysis);
    assert_eq!(cfg.model.model_dim, 64);
    assert_eq!(cfg.model.codes, 64);
    assert_eq!(cfg.analysis.alpha, 0.5);
    assert_eq!(cfg.paths.reports, std::path::absolute(&dir).unwrap().join("out"));
    assert_eq!(cfg.paths.checkpoint, std::path::absolute(&dir).unwrap().join("m.ckpt"));
}

#[test]
fn echoed_config_round_trips() {
    let dir = scratch("echo");
    let path = dir.join("c.json");
    std::fs::write(&path, TINY).unwrap();
    assert_eq!(cli(&path, &["synth-data"]), EXIT_OK);
    let loaded = load_config(&path).unwrap();
    let echoed = load_config(&dir.join("reports/config.json")).unwrap();
    assert_eq!(loaded, echoed);
    assert_eq!(read(dir.join("reports/config.json")), loaded.to_json());
}

fn stderr_of(config_text: &str, name: &str) -> (Option<i32>, String) {
    let dir = scratch(name);
    let path = dir.join("c.json");
    std::fs::write(&path, config_text).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_prosody"))
        .args(["-c", path.to_str().unwrap(), "synth-data"])
        .output()
        .unwrap();
    (out.status.code(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn bad_config_values_name_their_key_path() {
    let (code, err) = stderr_of(r#"{"model": {"model_dim": -1}}"#, "negative");
    assert_eq!(code, Some(EXIT_USAGE));
    assert!(err.contains("model.model_dim"), "{err}");

    let (code, err) = stderr_of(r#"{"train": {"learning_rat": 0.1}}"#, "unknown");
    assert_eq!(code, Some(EXIT_USAGE));
    assert!(err.contains("train") && err.contains("learning_rat"), "{err}");

    let (code, err) = stderr_of(r#"{"model": {"model_dim": 0}}"#, "zero");
    assert_eq!(code, Some(EXIT_USAGE));
    assert!(err.contains("model_dim"), "{err}");
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(run(["prosody", "frobnicate"]), EXIT_USAGE);
    assert_eq!(run(["prosody", "analyze", "nothing"]), EXIT_USAGE);
    assert_eq!(run(["prosody", "--help"]), EXIT_OK);
    assert_eq!(run(["prosody", "-c", "/nonexistent/prosody.json", "prepare"]), EXIT_USAGE);
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = scratch("nockpt");
    let path = dir.join("c.json");
    std::fs::write(&path, TINY).unwrap();
    assert_eq!(cli(&path, &["synth-data"]), EXIT_OK);
    assert_eq!(cli(&path, &["resynth"]), EXIT_DATA);
    assert_eq!(cli(&path, &["ablate-continuous"]), EXIT_DATA);
}

#[test]
fn only_prepare_writes_the_feature_cache() {
    let dir = scratch("cache");
    let path = dir.join("c.json");
    std::fs::write(&path, TINY.replace("\"max_steps\": 300", "\"max_steps\": 3")).unwrap();
    assert_eq!(cli(&path, &["synth-data"]), EXIT_OK);
    assert_eq!(cli(&path, &["train"]), EXIT_OK);
    assert!(!dir.join("cache").exists());
    assert_eq!(cli(&path, &["prepare"]), EXIT_OK);
    let entries = std::fs::read_dir(dir.join("cache")).unwrap().count();
    assert_eq!(entries, 8);
    assert_eq!(json(dir.join("reports/prepare.json"))["utterances"], 8);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = scratch("repro");
    let path = dir.join("c.json");
    std::fs::write(&path, TINY.replace("\"max_steps\": 300", "\"max_steps\": 12")).unwrap();
    assert_eq!(cli(&path, &["synth-data"]), EXIT_OK);
    assert_eq!(cli(&path, &["train"]), EXIT_OK);
    let first = (read(dir.join("reports/train.json")), std::fs::read(dir.join("checkpoints/model.ckpt")).unwrap());
    assert_eq!(cli(&path, &["train"]), EXIT_OK);
    let second = (read(dir.join("reports/train.json")), std::fs::read(dir.join("checkpoints/model.ckpt")).unwrap());
    assert_eq!(first, second);

    assert_eq!(cli(&path, &["train", "--max-steps", "5"]), EXIT_OK);
    assert_eq!(cli(&path, &["train", "--resume", "--max-steps", "12"]), EXIT_OK);
    let resumed = std::fs::read(dir.join("checkpoints/model.ckpt")).unwrap();
    assert_eq!(resumed, first.1);
    assert_eq!(read(dir.join("reports/train_log.jsonl")).lines().count(), 12);
}
