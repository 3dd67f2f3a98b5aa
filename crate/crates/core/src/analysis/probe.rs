use serde::{Deserialize, Serialize};

use super::pca::PcaProjection;
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::model::CodecModel;
use crate::quantizer::CodeSequence;
use crate::scalar::Scalar;
use crate::signal::{
    estimate_f0_with, frame_rms, invert_mel, lowpass, AudioBuffer, MelSpectrogram, PitchConfig, PitchContour,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub griffin_lim_iters: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    /// YIN threshold. Griffin-Lim phase noise raises the dip of periodic
    /// frames, so this is looser than for recorded audio.
    pub voicing_threshold: f64,
    /// Low-pass applied before pitch tracking; `None` tracks the full band.
    pub lowpass_hz: Option<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            griffin_lim_iters: 32,
            f0_min: 50.0,
            f0_max: 500.0,
            voicing_threshold: 0.3,
            lowpass_hz: Some(1000.0),
        }
    }
}

/// F0 of resynthesized audio under the probe settings.
pub fn probe_pitch(audio: &AudioBuffer, cfg: &ProbeConfig) -> Result<PitchContour> {
    let pc = PitchConfig {
        threshold: cfg.voicing_threshold,
        f_min: cfg.f0_min,
        f_max: cfg.f0_max,
        ..PitchConfig::default()
    };
    match cfg.lowpass_hz {
        Some(c) => estimate_f0_with(&lowpass(audio, c)?, &pc),
        None => estimate_f0_with(audio, &pc),
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub mel: MelSpectrogram,
    pub audio: AudioBuffer,
}

/// Decodes `reference` with every phoneme position carrying `codes` (one
/// index per level) and inverts the mel to audio.
pub fn synth_probe<T: Scalar>(
    model: &CodecModel<T>,
    reference: &Utterance,
    codes: &[usize],
    speaker: usize,
    cfg: &ProbeConfig,
) -> Result<Probe> {
    let rvq = model
        .rvq
        .as_ref()
        .ok_or_else(|| Error::Contract("probes need a quantized model".into()))?;
    let n = reference.len();
    let indices: Vec<Vec<usize>> = codes.iter().map(|&c| vec![c; n]).collect();
    let seq = CodeSequence::from_indices(indices, rvq)?;
    let mel = model.decode_codes(&seq, &reference.phonemes, &reference.durations, speaker)?;
    let audio = invert_mel(&mel, cfg.griffin_lim_iters)?;
    Ok(Probe { mel, audio })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeasurement {
    pub code: usize,
    pub speaker: usize,
    /// Mean F0 over voiced frames; `None` when no frame is voiced.
    pub f0: Option<f64>,
    pub rms: f64,
    pub pc1: f64,
    pub pc2: f64,
}

impl ProbeMeasurement {
    pub fn voiced(&self) -> bool {
        self.f0.is_some()
    }
}

pub fn measure_probe(
    audio: &AudioBuffer,
    code: usize,
    code_vector: &[f64],
    proj: &PcaProjection,
    speaker: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeMeasurement> {
    let pitch = probe_pitch(audio, cfg)?;
    let rms = frame_rms(audio, 256, 1024)?;
    let rms = if rms.is_empty() {
        audio.rms()
    } else {
        rms.iter().sum::<f64>() / rms.len() as f64
    };
    let pc = proj.project(code_vector);
    Ok(ProbeMeasurement {
        code,
        speaker,
        f0: pitch.mean_voiced_f0(),
        rms,
        pc1: pc.first().copied().unwrap_or(0.0),
        pc2: pc.get(1).copied().unwrap_or(0.0),
    })
}

/// Most frequent index at `level`; ties go to the lower index.
pub fn most_frequent_code(sequences: &[CodeSequence], level: usize, k: usize) -> Option<usize> {
    let mut h = vec![0usize; k];
    for s in sequences {
        if let Some(l) = s.indices.get(level) {
            for &i in l {
                if i < k {
                    h[i] += 1;
                }
            }
        }
    }
    let (best, &count) = h.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (count > 0).then_some(best)
}

/// Probes for every `(speaker, path code)` pair: `out[s][i]` measures
/// `path[i]` voiced by `speakers[s]`. `fill` supplies the codes of levels 2
/// and up.
pub fn speaker_relative_report<T: Scalar>(
    model: &CodecModel<T>,
    path: &[usize],
    fill: &[usize],
    reference: &Utterance,
    speakers: &[usize],
    proj: &PcaProjection,
    cfg: &ProbeConfig,
) -> Result<Vec<Vec<ProbeMeasurement>>> {
    if speakers.len() < 2 {
        return Err(Error::Contract("speaker-relative report needs at least two speakers".into()));
    }
    let rvq = model
        .rvq
        .as_ref()
        .ok_or_else(|| Error::Contract("probes need a quantized model".into()))?;
    speakers
        .iter()
        .map(|&s| {
            path.iter()
                .map(|&c| {
                    let mut codes = vec![c];
                    codes.extend_from_slice(fill);
                    let probe = synth_probe(model, reference, &codes, s, cfg)?;
                    let v: Vec<f64> = rvq.levels[0].entry(c).iter().map(|x| x.as_f64()).collect();
                    measure_probe(&probe.audio, c, &v, proj, s, cfg)
                })
                .collect()
        })
        .collect()
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    crate::metrics::pearson(&ranks(x), &ranks(y))
}
