use std::path::{Path, PathBuf};

use prosody_core::analysis::{Embedding, ProbeConfig, DEFAULT_ALPHA};
use prosody_core::corpus::SynthSpec;
use prosody_core::model::ModelConfig;
use prosody_core::signal::FeatureConfig;
use prosody_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// File locations. Relative paths are resolved against the config file's
/// directory when loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Manifest to train and analyse on; defaults to the synthetic corpus
    /// manifest under `data`.
    pub manifest: Option<PathBuf>,
    /// Manifest for latent analysis; the extraction subset of `manifest` when unset.
    pub analysis_manifest: Option<PathBuf>,
    /// Output directory of `synth-data`.
    pub data: PathBuf,
    pub cache: PathBuf,
    pub checkpoint: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: None,
            analysis_manifest: None,
            data: "data".into(),
            cache: "cache".into(),
            checkpoint: "checkpoints/model.ckpt".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.data.join("manifest.jsonl"))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for m in [&mut self.manifest, &mut self.analysis_manifest].into_iter().flatten() {
            fix(m);
        }
        fix(&mut self.data);
        fix(&mut self.cache);
        fix(&mut self.checkpoint);
        fix(&mut self.reports);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Additive smoothing of code histograms.
    pub alpha: f64,
    /// Every `1/extraction_fraction`-th utterance forms the extraction set.
    pub extraction_fraction: f64,
    /// Path axis (1 or 2).
    pub axis: usize,
    pub n_points: usize,
    /// Corridor half-width in units of the off-axis standard deviation.
    pub corridor: f64,
    pub embedding: Embedding,
    /// Probe reference utterance id; the first extraction utterance if unset.
    pub reference: Option<String>,
    /// Level-2 probe code; the most frequent one if unset.
    pub level2_code: Option<usize>,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            extraction_fraction: 0.1,
            axis: 1,
            n_points: 6,
            corridor: 0.5,
            embedding: Embedding::Mds,
            reference: None,
            level2_code: None,
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub precision: Precision,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub paths: Paths,
    pub analysis: AnalysisConfig,
    /// Frames a manifest's duration sum may differ from the mel by.
    pub duration_tolerance: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: prosody_core::Error| CliError::Usage(e.to_string());
        self.features.validate().map_err(usage)?;
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.synth.validate().map_err(usage)?;
        let a = &self.analysis;
        let bad = |m: &str| Err(CliError::Usage(format!("analysis.{m}")));
        if !(a.alpha > 0.0 && a.alpha.is_finite()) {
            return bad("alpha: must be positive");
        }
        if !(a.extraction_fraction > 0.0 && a.extraction_fraction <= 1.0) {
            return bad("extraction_fraction: must lie in (0, 1]");
        }
        if !(a.axis == 1 || a.axis == 2) {
            return bad("axis: must be 1 or 2");
        }
        if a.n_points < 2 {
            return bad("n_points: must be at least 2");
        }
        if !(a.corridor > 0.0) {
            return bad("corridor: must be positive");
        }
        if a.probe.griffin_lim_iters == 0 {
            return bad("probe.griffin_lim_iters: must be positive");
        }
        if !(a.probe.voicing_threshold > 0.0 && a.probe.voicing_threshold < 1.0) {
            return bad("probe.voicing_threshold: must lie in (0, 1)");
        }
        let nyquist = self.features.sample_rate as f64 / 2.0;
        if a.probe.lowpass_hz.is_some_and(|c| !(c > 0.0 && c < nyquist)) {
            return bad("probe.lowpass_hz: must lie below the Nyquist frequency");
        }
        if !(a.probe.f0_min > 0.0 && a.probe.f0_min < a.probe.f0_max && a.probe.f0_max < nyquist) {
            return bad("probe.f0_min/f0_max: need 0 < f0_min < f0_max < Nyquist");
        }
        if self.model.mel_bands != self.features.n_mels {
            return Err(CliError::Usage(format!(
                "model.mel_bands ({}) must equal features.n_mels ({})",
                self.model.mel_bands, self.features.n_mels
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Parses, fills defaults, resolves paths against the file's directory and
/// validates. Unknown keys and type errors name the key path.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        CliError::Usage(format!("config {}: at `{at}`: {}", path.display(), e.inner()))
    })?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let base = std::path::absolute(base).map_err(|e| CliError::Usage(format!("cannot resolve {}: {e}", base.display())))?;
    cfg.paths.resolve(&base);
    cfg.validate()?;
    Ok(cfg)
}
