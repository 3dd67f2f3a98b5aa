use super::{Utterance, PAD};
use crate::error::{Error, Result};
use crate::signal::{FeatureConfig, MelSpectrogram};

/// Zero-padded minibatch. Matrices are row-major with the batch index outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub speakers: Vec<usize>,
    /// `B × n_max`, PAD beyond each length.
    pub phonemes: Vec<usize>,
    /// `B × n_max`, zero beyond each length.
    pub durations: Vec<usize>,
    /// `B × t_max × bands`, zero beyond each length.
    pub mel: Vec<f64>,
    pub phone_mask: Vec<bool>,
    pub frame_mask: Vec<bool>,
    pub n_max: usize,
    pub t_max: usize,
    pub bands: usize,
    pub transcripts: Vec<Option<String>>,
    features: FeatureConfig,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn phone_count(&self, b: usize) -> usize {
        self.phone_mask[b * self.n_max..(b + 1) * self.n_max]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    pub fn frame_count(&self, b: usize) -> usize {
        self.frame_mask[b * self.t_max..(b + 1) * self.t_max]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    pub fn item_phonemes(&self, b: usize) -> &[usize] {
        &self.phonemes[b * self.n_max..b * self.n_max + self.phone_count(b)]
    }

    pub fn item_durations(&self, b: usize) -> &[usize] {
        &self.durations[b * self.n_max..b * self.n_max + self.phone_count(b)]
    }

    pub fn item_mel(&self, b: usize) -> &[f64] {
        let w = self.t_max * self.bands;
        &self.mel[b * w..b * w + self.frame_count(b) * self.bands]
    }

    pub fn features(&self) -> &FeatureConfig {
        &self.features
    }
}

/// Pads utterances to a common length. `pad_to = (n, t)` forces at least
/// that many phonemes and frames.
pub fn make_batch(utts: &[&Utterance], pad_to: Option<(usize, usize)>) -> Result<Batch> {
    let first = utts
        .first()
        .ok_or_else(|| Error::Contract("cannot batch an empty utterance list".into()))?;
    let bands = first.mel.bands();
    if let Some(u) = utts.iter().find(|u| u.mel.bands() != bands) {
        return Err(Error::dim(
            "make_batch",
            format!("utterance {} has {} bands, expected {bands}", u.id, u.mel.bands()),
        ));
    }
    let (pn, pt) = pad_to.unwrap_or((0, 0));
    let n_max = utts.iter().map(|u| u.len()).max().unwrap().max(pn);
    let t_max = utts.iter().map(|u| u.frames()).max().unwrap().max(pt);
    let b = utts.len();
    let mut batch = Batch {
        ids: Vec::with_capacity(b),
        speakers: Vec::with_capacity(b),
        phonemes: vec![PAD; b * n_max],
        durations: vec![0; b * n_max],
        mel: vec![0.0; b * t_max * bands],
        phone_mask: vec![false; b * n_max],
        frame_mask: vec![false; b * t_max],
        n_max,
        t_max,
        bands,
        transcripts: Vec::with_capacity(b),
        features: FeatureConfig {
            sample_rate: first.mel.sample_rate,
            n_fft: first.mel.n_fft,
            hop_length: first.mel.hop_length,
            n_mels: bands,
            ..FeatureConfig::default()
        },
    };
    for (i, u) in utts.iter().enumerate() {
        batch.ids.push(u.id.clone());
        batch.speakers.push(u.speaker_id);
        batch.transcripts.push(u.transcript.clone());
        let n = u.len();
        batch.phonemes[i * n_max..i * n_max + n].copy_from_slice(&u.phonemes);
        batch.durations[i * n_max..i * n_max + n].copy_from_slice(&u.durations);
        batch.phone_mask[i * n_max..i * n_max + n].fill(true);
        let t = u.frames();
        let w = t_max * bands;
        batch.mel[i * w..i * w + t * bands].copy_from_slice(u.mel.values());
        batch.frame_mask[i * t_max..i * t_max + t].fill(true);
    }
    Ok(batch)
}

/// Inverse of [`make_batch`].
pub fn unbatch(batch: &Batch) -> Result<Vec<Utterance>> {
    (0..batch.size())
        .map(|b| {
            let frames = batch.frame_count(b);
            Ok(Utterance {
                id: batch.ids[b].clone(),
                speaker_id: batch.speakers[b],
                phonemes: batch.item_phonemes(b).to_vec(),
                durations: batch.item_durations(b).to_vec(),
                mel: MelSpectrogram::new(batch.item_mel(b).to_vec(), frames, batch.bands, &batch.features)?,
                transcript: batch.transcripts[b].clone(),
            })
        })
        .collect()
}
