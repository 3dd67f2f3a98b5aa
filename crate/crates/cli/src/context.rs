use std::fs;
use std::path::{Path, PathBuf};

use prosody_core::corpus::{load_corpus, parse_manifest, synth_corpus, Corpus, FeatureCache, Utterance};
use prosody_core::model::CodecModel;
use prosody_core::signal::{invert_mel, write_wav, MelSpectrogram, WavFormat};
use prosody_core::{Error, Scalar};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, CliResult, UtteranceSet};

/// Loaded configuration plus the file helpers every command shares.
pub struct Context {
    pub cfg: RunConfig,
}

#[derive(Serialize)]
struct MelFile<'a> {
    id: &'a str,
    frames: usize,
    bands: usize,
    values: &'a [f64],
}

impl Context {
    pub fn new(cfg: RunConfig) -> Self {
        Self { cfg }
    }

    pub fn reports(&self) -> &Path {
        &self.cfg.paths.reports
    }

    pub fn write(&self, path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| io_err(path, e))
    }

    pub fn write_json(&self, path: &Path, value: &impl Serialize) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(path, s)
    }

    pub fn echo_config(&self) -> CliResult<()> {
        self.write(&self.reports().join("config.json"), self.cfg.to_json())
    }

    /// Writes `<dir>/<id>.json` and, with `wav`, a Griffin-Lim `<id>.wav`.
    pub fn write_mel(&self, dir: &Path, id: &str, mel: &MelSpectrogram, wav: bool) -> CliResult<()> {
        let file = MelFile {
            id,
            frames: mel.frames(),
            bands: mel.bands(),
            values: mel.values(),
        };
        self.write_json(&dir.join(format!("{id}.json")), &file)?;
        if wav {
            let audio = invert_mel(mel, self.cfg.analysis.probe.griffin_lim_iters)?;
            write_wav(dir.join(format!("{id}.wav")), &audio, WavFormat::Pcm16)?;
        }
        Ok(())
    }

    fn read_cache(&self) -> FeatureCache {
        FeatureCache::read_only(&self.cfg.paths.cache)
    }

    /// The training manifest with a fresh vocabulary and speaker list.
    pub fn load_training_corpus(&self) -> CliResult<Corpus> {
        let cache = self.read_cache();
        Ok(load_corpus(
            self.cfg.paths.manifest_path(),
            &self.cfg.features,
            Some(&cache),
            None,
            self.cfg.duration_tolerance,
        )?)
    }

    /// Loads `manifest` against a trained model: phonemes must be in its
    /// vocabulary and speaker names are mapped to its speaker indices.
    pub fn load_for_model<T: Scalar>(&self, model: &CodecModel<T>, manifest: &Path) -> CliResult<Vec<Utterance>> {
        let cache = self.read_cache();
        let corpus = load_corpus(
            manifest,
            &model.features,
            Some(&cache),
            Some(&model.vocab),
            self.cfg.duration_tolerance,
        )?;
        let map: Vec<usize> = corpus
            .speakers
            .iter()
            .map(|name| {
                model.speakers.iter().position(|s| s == name).ok_or_else(|| {
                    Error::Contract(format!("speaker `{name}` in {} is unknown to the model", manifest.display()))
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(corpus
            .utterances
            .into_iter()
            .map(|mut u| {
                u.speaker_id = map[u.speaker_id];
                u
            })
            .collect())
    }

    /// Every `stride`-th utterance, starting with the first, is held out for
    /// extraction.
    pub fn extraction_stride(&self) -> usize {
        (1.0 / self.cfg.analysis.extraction_fraction).round().max(1.0) as usize
    }

    pub fn select(&self, utts: Vec<Utterance>, set: UtteranceSet) -> Vec<Utterance> {
        let stride = self.extraction_stride();
        utts.into_iter()
            .enumerate()
            .filter(|(i, _)| match set {
                UtteranceSet::All => true,
                UtteranceSet::Extraction | UtteranceSet::Analysis => i % stride == 0,
                UtteranceSet::Train => i % stride != 0 || stride == 1,
            })
            .map(|(_, u)| u)
            .collect()
    }

    /// Utterances of `set`, from the training manifest unless `set` is
    /// [`UtteranceSet::Analysis`].
    pub fn model_set<T: Scalar>(&self, model: &CodecModel<T>, set: UtteranceSet) -> CliResult<Vec<Utterance>> {
        let picked = match (set, &self.cfg.paths.analysis_manifest) {
            (UtteranceSet::Analysis, Some(m)) => self.load_for_model(model, m)?,
            _ => self.select(self.load_for_model(model, &self.cfg.paths.manifest_path())?, set),
        };
        if picked.is_empty() {
            return Err(Error::Contract(format!("the {set:?} set is empty")).into());
        }
        Ok(picked)
    }

    /// The analysis manifest when configured, else the extraction subset.
    pub fn analysis_set<T: Scalar>(&self, model: &CodecModel<T>) -> CliResult<Vec<Utterance>> {
        self.model_set(model, UtteranceSet::Analysis)
    }

    pub fn load_model<T: Scalar>(&self, path: Option<&Path>) -> CliResult<CodecModel<T>> {
        let path = path.unwrap_or(&self.cfg.paths.checkpoint);
        Ok(CodecModel::load(path)?)
    }

    pub fn out_dir(&self, out: Option<&Path>, default: &str) -> PathBuf {
        out.map(Path::to_path_buf).unwrap_or_else(|| self.reports().join(default))
    }

    pub fn prepare(&self) -> CliResult<()> {
        let cache = FeatureCache::new(&self.cfg.paths.cache)?;
        let manifest = parse_manifest(self.cfg.paths.manifest_path(), None)?;
        let mut frames = 0;
        for d in &manifest.records {
            let mel = cache
                .get_or_compute(&d.audio, &self.cfg.features)
                .map_err(|e| Error::Record {
                    index: d.index,
                    field: "audio",
                    reason: e.to_string(),
                })?;
            frames += mel.frames();
        }
        let summary = serde_json::json!({
            "utterances": manifest.records.len(),
            "frames": frames,
            "speakers": manifest.speakers,
            "phonemes": manifest.vocab.symbols(),
        });
        self.write_json(&self.reports().join("prepare.json"), &summary)
    }

    pub fn synth_data(&self) -> CliResult<()> {
        let sc = synth_corpus(&self.cfg.synth, &self.cfg.features)?;
        let manifest = sc.write(&self.cfg.paths.data)?;
        let segments: Vec<_> = sc
            .corpus
            .utterances
            .iter()
            .enumerate()
            .map(|(i, u)| {
                serde_json::json!({
                    "id": u.id,
                    "speaker": sc.corpus.speakers[u.speaker_id],
                    "f0": sc.segment_f0[i],
                    "pitch": sc.segment_pitch[i],
                    "amplitude": sc.segment_amplitude[i],
                })
            })
            .collect();
        let summary = serde_json::json!({
            "manifest": manifest,
            "utterances": sc.corpus.utterances.len(),
            "segments": segments,
        });
        self.write_json(&self.reports().join("synth_data.json"), &summary)
    }
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
