use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{AudioBuffer, FeatureConfig, MelSpectrogram};
use crate::error::{Error, Result};

pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Forward/inverse FFT pair plus analysis window for one frame size.
pub(crate) struct Stft {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann(n_fft),
            fwd: planner.plan_fft_forward(n_fft),
            inv: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            1 + (len - self.n_fft) / self.hop
        }
    }

    /// Half spectrum of every frame, `frames × bins`.
    pub fn forward(&self, x: &[f64]) -> Vec<Complex64> {
        let t = self.frames(x.len());
        let bins = self.bins();
        let mut out = Vec::with_capacity(t * bins);
        let mut buf = vec![Complex64::default(); self.n_fft];
        for f in 0..t {
            let seg = &x[f * self.hop..f * self.hop + self.n_fft];
            for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex64::new(s * w, 0.0);
            }
            self.fwd.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        out
    }

    /// Least-squares inverse of `forward` for a Hermitian half spectrum.
    /// The window-power normalizer is floored at `min_norm`; below 1e-10 the
    /// sample is left at zero.
    pub fn inverse(&self, spec: &[Complex64], frames: usize, min_norm: f64) -> Vec<f64> {
        let n = self.n_fft;
        let bins = self.bins();
        let len = n + frames.saturating_sub(1) * self.hop;
        let mut acc = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::default(); n];
        for f in 0..frames {
            let half = &spec[f * bins..(f + 1) * bins];
            buf[..bins].copy_from_slice(half);
            for k in 1..n - bins + 1 {
                buf[n - k] = half[k].conj();
            }
            self.inv.process(&mut buf);
            let off = f * self.hop;
            for i in 0..n {
                let w = self.window[i];
                acc[off + i] += w * buf[i].re / n as f64;
                norm[off + i] += w * w;
            }
        }
        for (a, &z) in acc.iter_mut().zip(&norm) {
            *a = if z > 1e-10 { *a / z.max(min_norm) } else { 0.0 };
        }
        acc
    }
}

/// STFT magnitudes, row-major `frames × (n_fft/2 + 1)`, periodic Hann window, no centering.
pub fn stft_magnitude(samples: &[f64], n_fft: usize, hop: usize) -> Result<(Vec<f64>, usize)> {
    if samples.len() < n_fft {
        return Err(Error::dim(
            "stft",
            format!("{} samples shorter than one {n_fft}-sample window", samples.len()),
        ));
    }
    let stft = Stft::new(n_fft, hop);
    let frames = stft.frames(samples.len());
    Ok((stft.forward(samples).iter().map(|c| c.norm()).collect(), frames))
}

/// Triangular mel filters on the HTK scale spanning 0 to Nyquist, each scaled
/// to unit area in Hz. Row-major `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Vec<f64> {
    let bins = cfg.n_fft / 2 + 1;
    let sr = cfg.sample_rate as f64;
    let top = hz_to_mel(sr / 2.0);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let scale = 2.0 / (hi - lo);
        for k in 0..bins {
            let f = k as f64 * sr / cfg.n_fft as f64;
            let w = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid));
            if w > 0.0 {
                fb[m * bins + k] = w * scale;
            }
        }
    }
    fb
}

/// Log-mel spectrogram: `ln(max(filterbank · |STFT|, floor))`.
pub fn mel_spectrogram(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if audio.sample_rate() != cfg.sample_rate {
        return Err(Error::Contract(format!(
            "audio sample rate {} differs from configured {}",
            audio.sample_rate(),
            cfg.sample_rate
        )));
    }
    let (mag, frames) = stft_magnitude(audio.samples(), cfg.n_fft, cfg.hop_length)?;
    let fb = mel_filterbank(cfg);
    Ok(MelSpectrogram::new(
        apply_filterbank(&mag, frames, &fb, cfg),
        frames,
        cfg.n_mels,
        cfg,
    )?)
}

pub(crate) fn apply_filterbank(mag: &[f64], frames: usize, fb: &[f64], cfg: &FeatureConfig) -> Vec<f64> {
    let bins = cfg.n_fft / 2 + 1;
    let mut out = Vec::with_capacity(frames * cfg.n_mels);
    for t in 0..frames {
        let row = &mag[t * bins..(t + 1) * bins];
        for m in 0..cfg.n_mels {
            let filt = &fb[m * bins..(m + 1) * bins];
            let e: f64 = filt.iter().zip(row).map(|(a, b)| a * b).sum();
            out.push(e.max(cfg.log_floor).ln());
        }
    }
    out
}
