//! Dataset ingestion: phoneme vocabulary, JSONL manifests, duration
//! reconciliation, feature caching, padded batches and a synthetic corpus.

mod batch;
mod cache;
mod synth;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use batch::{make_batch, unbatch, Batch};
pub use cache::FeatureCache;
pub use synth::{synth_corpus, SynthCorpus, SynthSpec};

use crate::error::{Error, Result};
use crate::signal::{load_wav, mel_spectrogram, FeatureConfig, MelSpectrogram};

pub const PAD: usize = 0;
pub const PAD_SYMBOL: &str = "<pad>";
pub const DEFAULT_TOLERANCE: usize = 2;

/// Phoneme symbol ↔ ID bijection with `<pad>` fixed at ID 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct PhonemeVocab {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for PhonemeVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl PhonemeVocab {
    pub fn new() -> Self {
        let mut v = Self {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD_SYMBOL);
        v
    }

    /// Rebuilds a vocabulary from its ordered symbol list.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.first().map(String::as_str) != Some(PAD_SYMBOL) {
            return Err(Error::Contract(format!("vocabulary must start with {PAD_SYMBOL}")));
        }
        let mut v = Self {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        for s in symbols {
            if v.index.contains_key(&s) {
                return Err(Error::Contract(format!("duplicate phoneme symbol `{s}`")));
            }
            v.insert(&s);
        }
        Ok(v)
    }

    /// Returns the ID of `sym`, adding it if new.
    pub fn insert(&mut self, sym: &str) -> usize {
        if let Some(&id) = self.index.get(sym) {
            return id;
        }
        self.symbols.push(sym.to_string());
        self.index.insert(sym.to_string(), self.symbols.len() - 1);
        self.symbols.len() - 1
    }

    pub fn id(&self, sym: &str) -> Option<usize> {
        self.index.get(sym).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

impl TryFrom<Vec<String>> for PhonemeVocab {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::from_symbols(v)
    }
}

impl From<PhonemeVocab> for Vec<String> {
    fn from(v: PhonemeVocab) -> Self {
        v.symbols
    }
}

/// One aligned utterance with its log-mel features.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: usize,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub mel: MelSpectrogram,
    pub transcript: Option<String>,
}

impl Utterance {
    /// Checks lengths, positive durations, exact frame sum and ID range.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.phonemes.is_empty() || self.phonemes.len() != self.durations.len() {
            return Err(Error::Contract(format!(
                "utterance {}: {} phonemes vs {} durations",
                self.id,
                self.phonemes.len(),
                self.durations.len()
            )));
        }
        if self.durations.contains(&0) {
            return Err(Error::Contract(format!("utterance {}: zero duration", self.id)));
        }
        let sum: usize = self.durations.iter().sum();
        if sum != self.mel.frames() {
            return Err(Error::DurationMismatch {
                sum,
                frames: self.mel.frames(),
                tolerance: 0,
            });
        }
        if let Some(&bad) = self.phonemes.iter().find(|&&p| p == PAD || p >= vocab_size) {
            return Err(Error::Contract(format!(
                "utterance {}: phoneme id {bad} invalid for vocabulary of {vocab_size}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.mel.frames()
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }
}

/// Absorbs a frame-count difference of at most `tolerance` into the last phoneme.
pub fn reconcile_durations(durations: &[usize], frames: usize, tolerance: usize) -> Result<Vec<usize>> {
    let sum: usize = durations.iter().sum();
    let mismatch = || Error::DurationMismatch {
        sum,
        frames,
        tolerance,
    };
    if durations.is_empty() || sum.abs_diff(frames) > tolerance {
        return Err(mismatch());
    }
    let mut out = durations.to_vec();
    let last = out.last_mut().unwrap();
    let adjusted = *last as i64 + frames as i64 - sum as i64;
    if adjusted < 1 {
        return Err(mismatch());
    }
    *last = adjusted as usize;
    Ok(out)
}

/// One line of a JSONL manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub audio: String,
    pub speaker: String,
    pub phones: String,
    pub durations: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Manifest record resolved against a vocabulary; features not yet loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceDescriptor {
    pub index: usize,
    pub id: String,
    pub audio: PathBuf,
    pub speaker_id: usize,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub transcript: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceDescriptor>,
    pub vocab: PhonemeVocab,
    /// Speaker names in ID order (first appearance).
    pub speakers: Vec<String>,
}

/// Parses a JSONL manifest. Relative audio paths resolve against the
/// manifest's directory. With `vocab = None` the vocabulary is built in
/// first-appearance order; otherwise unknown symbols are errors.
pub fn parse_manifest(path: impl AsRef<Path>, vocab: Option<&PhonemeVocab>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut vocab_out = vocab.cloned().unwrap_or_default();
    let mut speakers: Vec<String> = Vec::new();
    let mut records = Vec::new();
    let mut index = 0;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec_err = |field: &'static str, reason: String| Error::Record { index, field, reason };
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| rec_err("record", e.to_string()))?;
        let audio = base.join(&rec.audio);
        if !audio.is_file() {
            return Err(rec_err("audio", format!("file not found: {}", audio.display())));
        }
        let mut phonemes = Vec::new();
        for sym in rec.phones.split_whitespace() {
            let id = match vocab {
                Some(v) => v
                    .id(sym)
                    .ok_or_else(|| rec_err("phones", format!("unknown symbol `{sym}`")))?,
                None => vocab_out.insert(sym),
            };
            if id == PAD {
                return Err(rec_err("phones", format!("reserved symbol `{sym}`")));
            }
            phonemes.push(id);
        }
        if phonemes.is_empty() {
            return Err(rec_err("phones", "no phonemes".into()));
        }
        if rec.durations.len() != phonemes.len() {
            return Err(rec_err(
                "durations",
                format!("{} durations for {} phonemes", rec.durations.len(), phonemes.len()),
            ));
        }
        if rec.durations.contains(&0) {
            return Err(rec_err("durations", "zero duration".into()));
        }
        let speaker_id = match speakers.iter().position(|s| *s == rec.speaker) {
            Some(i) => i,
            None => {
                speakers.push(rec.speaker.clone());
                speakers.len() - 1
            }
        };
        records.push(UtteranceDescriptor {
            index,
            id: rec.id.unwrap_or_else(|| format!("utt{index:05}")),
            audio,
            speaker_id,
            phonemes,
            durations: rec.durations,
            transcript: rec.text,
        });
        index += 1;
    }
    Ok(Manifest {
        records,
        vocab: vocab_out,
        speakers,
    })
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Loaded utterances with their vocabulary and speaker names.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub vocab: PhonemeVocab,
    pub speakers: Vec<String>,
}

/// Computes (or fetches cached) features for one descriptor and reconciles
/// its durations.
pub fn load_utterance(
    desc: &UtteranceDescriptor,
    cfg: &FeatureConfig,
    cache: Option<&FeatureCache>,
    tolerance: usize,
) -> Result<Utterance> {
    let rec_err = |field: &'static str, reason: String| Error::Record {
        index: desc.index,
        field,
        reason,
    };
    let mel = match cache {
        Some(c) => c.get_or_compute(&desc.audio, cfg),
        None => load_wav(&desc.audio).and_then(|a| mel_spectrogram(&a, cfg)),
    }
    .map_err(|e| rec_err("audio", e.to_string()))?;
    let durations = reconcile_durations(&desc.durations, mel.frames(), tolerance)
        .map_err(|e| rec_err("durations", e.to_string()))?;
    Ok(Utterance {
        id: desc.id.clone(),
        speaker_id: desc.speaker_id,
        phonemes: desc.phonemes.clone(),
        durations,
        mel,
        transcript: desc.transcript.clone(),
    })
}

/// Parses a manifest and loads every record.
pub fn load_corpus(
    manifest: impl AsRef<Path>,
    cfg: &FeatureConfig,
    cache: Option<&FeatureCache>,
    vocab: Option<&PhonemeVocab>,
    tolerance: usize,
) -> Result<Corpus> {
    let m = parse_manifest(manifest, vocab)?;
    let utterances = m
        .records
        .iter()
        .map(|d| load_utterance(d, cfg, cache, tolerance))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        utterances,
        vocab: m.vocab,
        speakers: m.speakers,
    })
}

#[cfg(test)]
mod tests;
