use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{AudioBuffer, PitchContour};
use crate::error::{Error, Result};

/// YIN framing and voicing parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PitchConfig {
    pub frame_length: usize,
    pub hop_length: usize,
    pub threshold: f64,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            frame_length: 1024,
            hop_length: 256,
            threshold: 0.15,
            f_min: 50.0,
            f_max: 600.0,
        }
    }
}

/// F0 track with default framing (1024/256) and threshold 0.15.
pub fn estimate_f0(audio: &AudioBuffer, f_min: f64, f_max: f64) -> Result<PitchContour> {
    estimate_f0_with(
        audio,
        &PitchConfig {
            f_min,
            f_max,
            ..PitchConfig::default()
        },
    )
}

pub fn estimate_f0_with(audio: &AudioBuffer, cfg: &PitchConfig) -> Result<PitchContour> {
    let sr = audio.sample_rate() as f64;
    if !(cfg.f_min > 0.0 && cfg.f_min < cfg.f_max && cfg.f_max < sr / 2.0) {
        return Err(Error::Contract(format!(
            "pitch range needs 0 < f_min < f_max < {}, got {}..{}",
            sr / 2.0,
            cfg.f_min,
            cfg.f_max
        )));
    }
    if cfg.frame_length < 4 || cfg.hop_length == 0 {
        return Err(Error::Contract("pitch frame and hop must be positive".into()));
    }
    let x = audio.samples();
    let n = cfg.frame_length;
    let tau_max = ((sr / cfg.f_min).ceil() as usize).min(n / 2);
    let tau_min = ((sr / cfg.f_max).floor() as usize).max(2);
    let frames = if x.len() < n { 0 } else { 1 + (x.len() - n) / cfg.hop_length };

    let mut f0 = Vec::with_capacity(frames);
    let mut d = vec![0.0; tau_max + 2];
    let mut cmnd = vec![1.0; tau_max + 2];
    for t in 0..frames {
        let frame = &x[t * cfg.hop_length..t * cfg.hop_length + n];
        f0.push(if tau_min + 1 >= tau_max {
            0.0
        } else {
            yin_frame(frame, sr, tau_min, tau_max, cfg, &mut d, &mut cmnd)
        });
    }
    Ok(PitchContour::from_f0(f0))
}

fn yin_frame(
    frame: &[f64],
    sr: f64,
    tau_min: usize,
    tau_max: usize,
    cfg: &PitchConfig,
    d: &mut [f64],
    cmnd: &mut [f64],
) -> f64 {
    let w = frame.len() - tau_max - 1;
    let energy: f64 = frame[..w].iter().map(|v| v * v).sum();
    if energy < 1e-10 * w as f64 {
        return 0.0;
    }
    let top = tau_max + 1;
    let mut running = 0.0;
    for tau in 1..=top {
        let s: f64 = frame[..w]
            .iter()
            .zip(&frame[tau..tau + w])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        d[tau] = s;
        running += s;
        cmnd[tau] = if running > 0.0 { s * tau as f64 / running } else { 1.0 };
    }

    let Some(mut tau) = (tau_min..=tau_max).find(|&t| cmnd[t] < cfg.threshold) else {
        return 0.0;
    };
    while tau < tau_max && cmnd[tau + 1] < cmnd[tau] {
        tau += 1;
    }
    let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
    let f = sr / (tau as f64 + shift.clamp(-1.0, 1.0));
    if f >= cfg.f_min && f <= cfg.f_max && f.is_finite() {
        f
    } else {
        0.0
    }
}

/// Zero-phase brick-wall low-pass: spectral components above `cutoff_hz`
/// are removed over the whole signal.
pub fn lowpass(audio: &AudioBuffer, cutoff_hz: f64) -> Result<AudioBuffer> {
    let sr = audio.sample_rate() as f64;
    if !(cutoff_hz > 0.0 && cutoff_hz < sr / 2.0) {
        return Err(Error::Contract(format!("low-pass cutoff must lie in (0, {}), got {cutoff_hz}", sr / 2.0)));
    }
    let n = audio.len();
    if n == 0 {
        return Ok(audio.clone());
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut x: Vec<Complex64> = audio.samples().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut x);
    for (k, v) in x.iter_mut().enumerate() {
        if k.min(n - k) as f64 * sr / n as f64 > cutoff_hz {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut x);
    AudioBuffer::clipped(x.iter().map(|c| c.re / n as f64).collect(), audio.sample_rate())
}

/// RMS per window; frame count `1 + (len - win) / hop`, zero if shorter than a window.
pub fn frame_rms(audio: &AudioBuffer, hop: usize, win: usize) -> Result<Vec<f64>> {
    if win == 0 || hop == 0 {
        return Err(Error::Contract("rms window and hop must be positive".into()));
    }
    let x = audio.samples();
    if x.len() < win {
        return Ok(Vec::new());
    }
    let frames = 1 + (x.len() - win) / hop;
    Ok((0..frames)
        .map(|t| {
            let seg = &x[t * hop..t * hop + win];
            (seg.iter().map(|v| v * v).sum::<f64>() / win as f64).sqrt()
        })
        .collect())
}

/// Z-scores of the voiced F0 values (population statistics, variance floored);
/// unvoiced frames keep F0 = 0. Output values may be negative.
pub fn normalize_contour(c: &PitchContour) -> Result<PitchContour> {
    let voiced: Vec<f64> = c
        .f0
        .iter()
        .zip(&c.voiced)
        .filter(|(_, &v)| v)
        .map(|(&f, _)| f)
        .collect();
    if voiced.is_empty() {
        return Err(Error::Analysis("cannot normalize a contour with no voiced frames".into()));
    }
    let n = voiced.len() as f64;
    let mean = voiced.iter().sum::<f64>() / n;
    let var = voiced.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    let f0 = c
        .f0
        .iter()
        .zip(&c.voiced)
        .map(|(&f, &v)| if v { (f - mean) / std } else { f })
        .collect();
    Ok(PitchContour {
        f0,
        voiced: c.voiced.clone(),
    })
}
