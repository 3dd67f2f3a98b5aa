//! Audio I/O and DSP: waveform to log-mel, approximate mel inversion, and
//! F0/energy measurement.

mod griffin_lim;
mod mel;
mod pitch;
mod wav;

use serde::{Deserialize, Serialize};

pub use griffin_lim::{invert_mel, invert_mel_with_history, Inversion};
pub use mel::{mel_filterbank, mel_spectrogram, stft_magnitude};
pub use pitch::{estimate_f0, estimate_f0_with, frame_rms, lowpass, normalize_contour, PitchConfig};
pub use wav::{load_wav, parse_wav, write_wav, WavFormat};

use crate::error::{Error, Result};

/// STFT and mel framing parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            n_fft: 1024,
            hop_length: 256,
            n_mels: 80,
            log_floor: 1e-5,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Contract(format!("features.{field}: {why}")));
        if self.sample_rate == 0 {
            return bad("sample_rate", "must be positive");
        }
        if self.n_fft < 4 || self.n_fft % 2 != 0 {
            return bad("n_fft", "must be an even number >= 4");
        }
        if self.hop_length == 0 {
            return bad("hop_length", "must be positive");
        }
        if self.n_mels == 0 {
            return bad("n_mels", "must be positive");
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return bad("log_floor", "must be positive");
        }
        Ok(())
    }

    /// Mel frame count for a signal of `len` samples (0 if shorter than a window).
    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            1 + (len - self.n_fft) / self.hop_length
        }
    }

    /// Signal length that yields exactly `frames` mel frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        self.n_fft + frames.saturating_sub(1) * self.hop_length
    }
}

/// Mono waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Contract("audio sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::Contract(format!(
                "audio sample {i} = {} outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a buffer, clipping samples into [-1, 1].
    pub fn clipped(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(
            samples
                .into_iter()
                .map(|s| if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) })
                .collect(),
            sample_rate,
        )
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Log-mel matrix, `frames × bands`, natural log of filterbank amplitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f64>,
    frames: usize,
    bands: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(values: Vec<f64>, frames: usize, bands: usize, cfg: &FeatureConfig) -> Result<Self> {
        if frames == 0 || bands == 0 {
            return Err(Error::Contract(format!("empty mel spectrogram ({frames}×{bands})")));
        }
        if values.len() != frames * bands {
            return Err(Error::dim(
                "mel",
                format!("{} values for {frames}×{bands}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite mel value".into()));
        }
        Ok(Self {
            values,
            frames,
            bands,
            hop_length: cfg.hop_length,
            n_fft: cfg.n_fft,
            sample_rate: cfg.sample_rate,
        })
    }

    /// Same framing metadata as `self`, new values.
    pub fn with_values(&self, values: Vec<f64>, frames: usize) -> Result<Self> {
        let cfg = self.feature_config_stub();
        Self::new(values, frames, self.bands, &cfg)
    }

    fn feature_config_stub(&self) -> FeatureConfig {
        FeatureConfig {
            sample_rate: self.sample_rate,
            n_fft: self.n_fft,
            hop_length: self.hop_length,
            n_mels: self.bands,
            ..FeatureConfig::default()
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.bands..(t + 1) * self.bands]
    }

    pub fn same_shape(&self, other: &MelSpectrogram) -> bool {
        self.frames == other.frames && self.bands == other.bands
    }
}

/// Per-frame F0 track; `f0[t] == 0` exactly when frame `t` is unvoiced.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchContour {
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl PitchContour {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }

    /// Mean F0 over voiced frames.
    pub fn mean_voiced_f0(&self) -> Option<f64> {
        let n = self.voiced_count();
        if n == 0 {
            return None;
        }
        Some(
            self.f0
                .iter()
                .zip(&self.voiced)
                .filter(|(_, &v)| v)
                .map(|(f, _)| f)
                .sum::<f64>()
                / n as f64,
        )
    }

    /// Builds a contour from raw F0 values, marking non-positive entries unvoiced.
    pub fn from_f0(f0: Vec<f64>) -> Self {
        let voiced = f0.iter().map(|&f| f > 0.0).collect();
        let f0 = f0.into_iter().map(|f| f.max(0.0)).collect();
        Self { f0, voiced }
    }
}
