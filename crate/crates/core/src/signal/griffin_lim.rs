use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::mel::{mel_filterbank, Stft};
use super::{AudioBuffer, FeatureConfig, MelSpectrogram};
use crate::error::{Error, Result};

const EDGE_NORM_FLOOR: f64 = 0.1;

/// Inverted audio plus the spectral-convergence error after each iteration.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub audio: AudioBuffer,
    pub errors: Vec<f64>,
}

/// Approximate waveform for a log-mel spectrogram (Griffin-Lim, fixed seed).
pub fn invert_mel(mel: &MelSpectrogram, iterations: usize) -> Result<AudioBuffer> {
    Ok(invert_mel_with_history(mel, iterations, 0)?.audio)
}

pub fn invert_mel_with_history(mel: &MelSpectrogram, iterations: usize, seed: u64) -> Result<Inversion> {
    if iterations == 0 {
        return Err(Error::Contract("griffin-lim needs at least one iteration".into()));
    }
    let cfg = FeatureConfig {
        sample_rate: mel.sample_rate,
        n_fft: mel.n_fft,
        hop_length: mel.hop_length,
        n_mels: mel.bands(),
        ..FeatureConfig::default()
    };
    cfg.validate()?;
    let target = linear_magnitude(mel, &cfg)?;
    let stft = Stft::new(cfg.n_fft, cfg.hop_length);
    let bins = stft.bins();
    let frames = mel.frames();

    // Full-spectrum weights: interior bins stand for a conjugate pair.
    let weight: Vec<f64> = (0..bins)
        .map(|k| if k == 0 || k == bins - 1 { 1.0 } else { 2.0 })
        .collect();
    let target_norm = target
        .iter()
        .enumerate()
        .map(|(i, s)| weight[i % bins] * s * s)
        .sum::<f64>()
        .sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec: Vec<Complex64> = (0..frames * bins)
        .map(|i| {
            let k = i % bins;
            let phase = if k == 0 || k == bins - 1 {
                0.0
            } else {
                rng.random_range(-PI..PI)
            };
            Complex64::from_polar(target[i], phase)
        })
        .collect();

    let mut errors = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let x = stft.inverse(&spec, frames, 0.0);
        let rebuilt = stft.forward(&x);
        let mut err = 0.0;
        for (i, (s, r)) in spec.iter_mut().zip(&rebuilt).enumerate() {
            let mag = r.norm();
            let d = mag - target[i];
            err += weight[i % bins] * d * d;
            *s = if mag > 0.0 {
                r * (target[i] / mag)
            } else {
                Complex64::new(target[i], 0.0)
            };
        }
        errors.push(if target_norm > 0.0 { err.sqrt() / target_norm } else { 0.0 });
    }
    // The exact projection divides by near-zero window power at the edges;
    // the output normalizer is floored so edge samples fade instead of spiking.
    let x = stft.inverse(&spec, frames, EDGE_NORM_FLOOR);
    Ok(Inversion {
        audio: AudioBuffer::clipped(x, cfg.sample_rate)?,
        errors,
    })
}

/// Non-negative linear magnitudes from log-mel via the clamped pseudo-inverse.
fn linear_magnitude(mel: &MelSpectrogram, cfg: &FeatureConfig) -> Result<Vec<f64>> {
    let bins = cfg.n_fft / 2 + 1;
    let fb = DMatrix::from_row_slice(cfg.n_mels, bins, &mel_filterbank(cfg));
    let pinv = fb
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Numeric(format!("filterbank pseudo-inverse: {e}")))?;
    let amps = DMatrix::from_fn(cfg.n_mels, mel.frames(), |m, t| mel.frame(t)[m].exp());
    let lin = pinv * amps;
    let mut out = Vec::with_capacity(mel.frames() * bins);
    for t in 0..mel.frames() {
        for k in 0..bins {
            out.push(lin[(k, t)].max(0.0));
        }
    }
    Ok(out)
}
