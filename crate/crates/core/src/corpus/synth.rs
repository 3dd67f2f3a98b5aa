use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_manifest, Corpus, ManifestRecord, PhonemeVocab, Utterance};
use crate::error::{Error, Result};
use crate::signal::{mel_spectrogram, write_wav, AudioBuffer, FeatureConfig, WavFormat};

const MAX_PARTIAL_HZ: f64 = 6000.0;
const GLIDE_SAMPLES: usize = 128;

/// Parameters of the seeded harmonic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub speakers: usize,
    pub utterances: usize,
    /// Phoneme inventory size (symbols `p1..pN`).
    pub phonemes: usize,
    /// Per-speaker `[low, high]` F0 range in Hz.
    pub f0_ranges: Vec<[f64; 2]>,
    /// Inclusive range of phonemes per utterance.
    pub phones_per_utterance: [usize; 2],
    /// Inclusive range of frames per phoneme.
    pub frames_per_phone: [usize; 2],
    /// Inclusive range of peak amplitude per segment.
    pub amplitude: [f64; 2],
    /// Standard deviation of additive white noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            speakers: 2,
            utterances: 32,
            phonemes: 8,
            f0_ranges: vec![[100.0, 150.0], [200.0, 300.0]],
            phones_per_utterance: [6, 10],
            frames_per_phone: [3, 8],
            amplitude: [0.2, 0.3],
            noise: 0.002,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("synth spec: {m}")));
        if self.speakers == 0 || self.utterances == 0 || self.phonemes == 0 {
            return bad("speakers, utterances and phonemes must be positive".into());
        }
        if self.f0_ranges.len() != self.speakers {
            return bad(format!("{} F0 ranges for {} speakers", self.f0_ranges.len(), self.speakers));
        }
        if self.f0_ranges.iter().any(|r| !(r[0] > 0.0 && r[0] <= r[1])) {
            return bad("F0 ranges must satisfy 0 < low <= high".into());
        }
        let ordered = |r: [usize; 2]| r[0] >= 1 && r[0] <= r[1];
        if !ordered(self.phones_per_utterance) || !ordered(self.frames_per_phone) {
            return bad("length ranges must satisfy 1 <= low <= high".into());
        }
        if !(self.amplitude[0] >= 0.0 && self.amplitude[0] <= self.amplitude[1] && self.amplitude[1] <= 0.9) {
            return bad("amplitude range must lie in [0, 0.9]".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative".into());
        }
        Ok(())
    }
}

/// Synthetic utterances with their waveforms and per-segment ground truth.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub audio: Vec<AudioBuffer>,
    /// Per utterance, per segment F0 in Hz.
    pub segment_f0: Vec<Vec<f64>>,
    /// Per utterance, per segment position of F0 within the speaker's range, in [0, 1].
    pub segment_pitch: Vec<Vec<f64>>,
    pub segment_amplitude: Vec<Vec<f64>>,
}

impl SynthCorpus {
    /// Writes `NNNN.wav` files (float32) plus `manifest.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut records = Vec::with_capacity(self.audio.len());
        for (u, a) in self.corpus.utterances.iter().zip(&self.audio) {
            let name = format!("{}.wav", u.id);
            write_wav(dir.join(&name), a, WavFormat::Float32)?;
            let phones: Vec<&str> = u
                .phonemes
                .iter()
                .map(|&p| self.corpus.vocab.symbol(p).unwrap_or("?"))
                .collect();
            records.push(ManifestRecord {
                id: Some(u.id.clone()),
                audio: name,
                speaker: self.corpus.speakers[u.speaker_id].clone(),
                phones: phones.join(" "),
                durations: u.durations.clone(),
                text: u.transcript.clone(),
            });
        }
        let path = dir.join("manifest.jsonl");
        write_manifest(&path, &records)?;
        Ok(path)
    }
}

/// Two-formant envelope per phoneme, fixed by the phoneme index alone.
fn formants(p: usize) -> [(f64, f64, f64); 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + p as u64);
    [
        (rng.random_range(300.0..800.0), 120.0, 1.0),
        (rng.random_range(900.0..2400.0), 200.0, 0.7),
    ]
}

fn envelope(f: f64, fm: &[(f64, f64, f64); 2], tilt: f64) -> f64 {
    let peaks: f64 = fm
        .iter()
        .map(|&(c, bw, g)| g * (-0.5 * ((f - c) / bw).powi(2)).exp())
        .sum();
    (0.15 + peaks) * (1.0 + f / 500.0).powf(-tilt)
}

/// Relative harmonic amplitudes for one segment, summing to one.
fn partials(f0: f64, fm: &[(f64, f64, f64); 2], tilt: f64) -> Vec<f64> {
    let n = (MAX_PARTIAL_HZ / f0).floor().max(1.0) as usize;
    let mut a: Vec<f64> = (1..=n).map(|h| envelope(h as f64 * f0, fm, tilt)).collect();
    let s: f64 = a.iter().sum();
    a.iter_mut().for_each(|v| *v /= s);
    a
}

/// Deterministic harmonic corpus: each phoneme is a constant-F0 segment with
/// a phoneme-specific formant envelope and a speaker-specific spectral tilt.
/// Segment F0 is `low · (high/low)^u` with `u ~ U(0,1)` for every speaker.
pub fn synth_corpus(spec: &SynthSpec, features: &FeatureConfig) -> Result<SynthCorpus> {
    spec.validate()?;
    features.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Contract(e.to_string()))?;
    let sr = features.sample_rate as f64;
    let mut vocab = PhonemeVocab::new();
    for p in 1..=spec.phonemes {
        vocab.insert(&format!("p{p}"));
    }
    let speakers: Vec<String> = (0..spec.speakers).map(|s| format!("spk{s}")).collect();

    let mut out = SynthCorpus {
        corpus: Corpus {
            utterances: Vec::with_capacity(spec.utterances),
            vocab,
            speakers,
        },
        audio: Vec::with_capacity(spec.utterances),
        segment_f0: Vec::new(),
        segment_pitch: Vec::new(),
        segment_amplitude: Vec::new(),
    };
    for i in 0..spec.utterances {
        let speaker = i % spec.speakers;
        let [lo, hi] = spec.f0_ranges[speaker];
        let tilt = 0.8 + 0.4 * (speaker % 3) as f64;
        let n = rng.random_range(spec.phones_per_utterance[0]..=spec.phones_per_utterance[1]);
        let mut phonemes = Vec::with_capacity(n);
        let mut durations = Vec::with_capacity(n);
        let mut pitch = Vec::with_capacity(n);
        let mut f0s = Vec::with_capacity(n);
        let mut amps = Vec::with_capacity(n);
        for _ in 0..n {
            phonemes.push(rng.random_range(1..=spec.phonemes));
            durations.push(rng.random_range(spec.frames_per_phone[0]..=spec.frames_per_phone[1]));
            let u: f64 = rng.random();
            pitch.push(u);
            f0s.push(lo * (hi / lo).powf(u));
            amps.push(rng.random_range(spec.amplitude[0]..=spec.amplitude[1]));
        }
        let frames: usize = durations.iter().sum();
        let len = features.samples_for(frames);

        // Segment k starts where frame c_k's window is centred on it.
        let lead = (features.n_fft - features.hop_length) / 2;
        let mut bounds = vec![0usize];
        let mut c = 0;
        for d in &durations[..n - 1] {
            c += d;
            bounds.push(c * features.hop_length + lead);
        }
        bounds.push(len);

        let parts: Vec<Vec<f64>> = (0..n)
            .map(|k| partials(f0s[k], &formants(phonemes[k]), tilt))
            .collect();
        let mut samples = vec![0.0; len];
        let mut phase = 0.0f64;
        for k in 0..n {
            for (j, s) in samples[bounds[k]..bounds[k + 1]].iter_mut().enumerate() {
                let w = if k > 0 && j < GLIDE_SAMPLES {
                    (j as f64 + 0.5) / GLIDE_SAMPLES as f64
                } else {
                    1.0
                };
                let prev = k.saturating_sub(1);
                let f0 = w * f0s[k] + (1.0 - w) * f0s[prev];
                let amp = w * amps[k] + (1.0 - w) * amps[prev];
                phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
                let h_max = parts[k].len().max(parts[prev].len());
                let mut v = 0.0;
                for h in 0..h_max {
                    let a = w * parts[k].get(h).copied().unwrap_or(0.0)
                        + (1.0 - w) * parts[prev].get(h).copied().unwrap_or(0.0);
                    if a > 0.0 {
                        v += a * ((h + 1) as f64 * phase).sin();
                    }
                }
                *s = amp * v + noise.sample(&mut rng);
            }
        }
        let audio = AudioBuffer::clipped(samples, features.sample_rate)?;
        let mel = mel_spectrogram(&audio, features)?;
        debug_assert_eq!(mel.frames(), frames);
        let symbols: Vec<String> = phonemes.iter().map(|p| format!("p{p}")).collect();
        out.corpus.utterances.push(Utterance {
            id: format!("synth{i:04}"),
            speaker_id: speaker,
            phonemes,
            durations,
            mel,
            transcript: Some(symbols.join(" ")),
        });
        out.audio.push(audio);
        out.segment_f0.push(f0s);
        out.segment_pitch.push(pitch);
        out.segment_amplitude.push(amps);
    }
    Ok(out)
}
