//! Conditioned autoencoder: phoneme encoder, Gaussian down/upsampler, mel
//! encoder, RVQ bottleneck and speaker-conditioned decoder.

mod conformer;
mod config;
mod resample;


use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, Quantization, SigmaPolicy, DEFAULT_SIGMA_DIVISOR};
pub use conformer::MASK_VALUE;
pub use resample::{centers, downsample, gaussian_weights, sigmas, upsample, ResampleWeights};

use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::checkpoint::Container;
use crate::corpus::{make_batch, Batch, PhonemeVocab, Utterance};
use crate::error::{Error, Result};
use crate::quantizer::{rvq_forward_graph, Codebook, CodeSequence, Rvq};
use crate::scalar::Scalar;
use crate::signal::{FeatureConfig, MelSpectrogram};
use conformer::{BlockDims, SeqMask};

pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;
pub const DEFAULT_EMA_EPSILON: f64 = 1e-5;

const LOG_SCALE: &str = "resample.log_scale";

/// Substitutions applied by [`CodecModel::forward`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Per batch item speaker override.
    pub speakers: Option<Vec<usize>>,
    /// Per batch item codes fed to the decoder instead of the encoder output.
    pub codes: Option<Vec<CodeSequence>>,
    /// Feed the continuous encoder output to the decoder.
    pub bypass: bool,
    /// Decode from the first `k` levels only.
    pub keep_levels: Option<usize>,
}

/// Single-utterance variant of [`ForwardOptions`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconstructOptions {
    pub speaker: Option<usize>,
    pub codes: Option<CodeSequence>,
    pub bypass: bool,
    pub keep_levels: Option<usize>,
}

pub struct ForwardOutput<T> {
    /// `[B, T, M]` predicted log-mel.
    pub pred: Var,
    /// Unweighted commitment term when the quantizer ran.
    pub commitment: Option<Var>,
    /// Per batch item codes when the quantizer ran.
    pub codes: Option<Vec<CodeSequence>>,
    /// Residual entering each level, `B·N × d` rows including padding.
    pub level_inputs: Vec<Vec<T>>,
    /// Continuous encoder output, `B·N × d`; empty when codes were overridden.
    pub latent: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantizerMeta {
    beta: f64,
    decay: f64,
    epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    model: ModelConfig,
    features: FeatureConfig,
    vocab: PhonemeVocab,
    speakers: Vec<String>,
    quantizer: Option<QuantizerMeta>,
}

/// Parameters and buffers of one codec.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecModel<T> {
    pub config: ModelConfig,
    pub features: FeatureConfig,
    pub vocab: PhonemeVocab,
    pub speakers: Vec<String>,
    /// Trainable arrays.
    pub params: ParamStore<T>,
    /// `None` for the continuous variant.
    pub rvq: Option<Rvq<T>>,
    /// Per band input/output offset.
    pub mel_mean: Vec<f64>,
    /// Global input/output scale.
    pub mel_scale: f64,
}

impl<T: Scalar> CodecModel<T> {
    /// Fresh model; `vocab_size` and `speakers` of 0 in `config` are taken
    /// from `vocab` and `speakers`.
    pub fn new(
        mut config: ModelConfig,
        features: FeatureConfig,
        vocab: PhonemeVocab,
        speakers: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        if config.vocab_size == 0 {
            config.vocab_size = vocab.len();
        }
        if config.speakers == 0 {
            config.speakers = speakers.len();
        }
        config.validate()?;
        features.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Contract(format!(
                "model.vocab_size {} but vocabulary has {} symbols",
                config.vocab_size,
                vocab.len()
            )));
        }
        if config.speakers != speakers.len() || speakers.is_empty() {
            return Err(Error::Contract(format!(
                "model.speakers {} but {} speaker names",
                config.speakers,
                speakers.len()
            )));
        }
        if config.mel_bands != features.n_mels {
            return Err(Error::Contract(format!(
                "model.mel_bands {} but features.n_mels {}",
                config.mel_bands, features.n_mels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let dims = BlockDims {
            dim: c.model_dim,
            ffn: c.model_dim * c.ffn_mult,
            kernel: c.conv_kernel,
        };
        let mut p = ParamStore::new();
        p.insert("phone.embed", conformer::gaussian(&[c.vocab_size, c.model_dim], 1.0, &mut rng));
        for prefix in ["phone", "enc", "dec"] {
            for l in 0..c.layers {
                conformer::init_block(&mut p, &format!("{prefix}.{l}"), dims, &mut rng);
            }
        }
        conformer::init_linear(&mut p, "enc.in", c.mel_bands, c.model_dim, &mut rng);
        conformer::init_linear(&mut p, "enc.out", c.model_dim, c.code_dim, &mut rng);
        conformer::init_linear(&mut p, "dec.in", c.code_dim, c.model_dim, &mut rng);
        p.insert("speaker.embed", conformer::gaussian(&[c.speakers, c.model_dim], 0.5, &mut rng));
        conformer::init_linear(&mut p, "dec.out", c.model_dim, c.mel_bands, &mut rng);
        if let Some(w) = p.get_mut("dec.out.w") {
            *w = w.map(|v| v * T::lit(0.1));
        }
        if let SigmaPolicy::Learnable { init } = c.sigma {
            p.insert(LOG_SCALE, Tensor::scalar(T::lit(init.ln())));
        }
        let rvq = match c.quantization {
            Quantization::Rvq => {
                let levels = (0..c.levels)
                    .map(|_| Codebook::random(c.codes, c.code_dim, DEFAULT_EMA_DECAY, DEFAULT_EMA_EPSILON, &mut rng))
                    .collect();
                Some(Rvq::new(levels, DEFAULT_BETA)?)
            }
            Quantization::None => None,
        };
        let bands = config.mel_bands;
        Ok(Self {
            config,
            features,
            vocab,
            speakers,
            params: p,
            rvq,
            mel_mean: vec![0.0; bands],
            mel_scale: 1.0,
        })
    }

    /// Sets the mel offset to the per-band mean and the scale to the global
    /// standard deviation over all frames of `utts`.
    pub fn fit_normalization(&mut self, utts: &[Utterance]) -> Result<()> {
        let m = self.config.mel_bands;
        let mut sum = vec![0.0; m];
        let mut n = 0usize;
        for u in utts {
            if u.mel.bands() != m {
                return Err(Error::dim("fit_normalization", format!("{} bands, expected {m}", u.mel.bands())));
            }
            for row in u.mel.values().chunks(m) {
                sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Contract("fit_normalization needs at least one frame".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = 0.0;
        for u in utts {
            for row in u.mel.values().chunks(m) {
                sq += row.iter().zip(&mean).map(|(v, mu)| (v - mu).powi(2)).sum::<f64>();
            }
        }
        self.mel_mean = mean;
        self.mel_scale = (sq / (n * m) as f64).sqrt().max(1e-3);
        Ok(())
    }

    pub fn is_quantized(&self) -> bool {
        self.rvq.is_some()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.bands != self.config.mel_bands {
            return Err(Error::dim(
                "model",
                format!("batch has {} bands, model expects {}", batch.bands, self.config.mel_bands),
            ));
        }
        if let Some(&p) = batch.phonemes.iter().find(|&&p| p >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "phoneme id {p} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if let Some(&s) = batch.speakers.iter().find(|&&s| s >= self.config.speakers) {
            return Err(Error::Contract(format!("speaker id {s} out of range for {} speakers", self.config.speakers)));
        }
        for b in 0..batch.size() {
            let sum: usize = batch.item_durations(b).iter().sum();
            if sum != batch.frame_count(b) {
                return Err(Error::DurationMismatch {
                    sum,
                    frames: batch.frame_count(b),
                    tolerance: 0,
                });
            }
        }
        Ok(())
    }

    /// `[B, T, N]` resampling weights; zero on padded frames and phonemes.
    fn resample_weights(&self, g: &Graph<T>, p: &Bound, batch: &Batch) -> Result<Var> {
        let (bs, n, t) = (batch.size(), batch.n_max, batch.t_max);
        if let SigmaPolicy::Learnable { .. } = self.config.sigma {
            // logits = A · exp(−2θ) with A = −(t+½−c_i)²/(2d_i²), σ_i = e^θ·d_i.
            let mut a = vec![0.0; bs * t * n];
            let mut masked = vec![false; bs * t * n];
            let mut pad_rows = vec![false; bs * t * n];
            for b in 0..bs {
                let d = batch.item_durations(b);
                let (nb, tb) = (d.len(), batch.frame_count(b));
                let unit = sigmas(d, &SigmaPolicy::Learnable { init: 1.0 }, None);
                let k = resample::log_kernel(tb, &centers(d), &unit);
                for ti in 0..t {
                    for i in 0..n {
                        let o = (b * t + ti) * n + i;
                        if ti < tb && i < nb {
                            a[o] = k[ti * nb + i];
                        } else {
                            masked[o] = true;
                            pad_rows[o] = ti >= tb;
                        }
                    }
                }
            }
            let theta = p.get(LOG_SCALE)?;
            let s = g.exp(g.scale(theta, T::lit(-2.0)));
            let a = g.constant(Tensor::from_f64(vec![bs, t, n], &a)?);
            let logits = g.masked_fill(g.scale_by(a, s)?, &masked, T::lit(MASK_VALUE))?;
            return g.masked_fill(g.softmax(logits), &pad_rows, T::zero());
        }
        let mut w = vec![0.0; bs * t * n];
        for b in 0..bs {
            let d = batch.item_durations(b);
            let rw = gaussian_weights(d, batch.frame_count(b), &self.config.sigma, None)?;
            for ti in 0..rw.frames {
                for i in 0..rw.phones {
                    w[(b * t + ti) * n + i] = rw.w[ti * rw.phones + i];
                }
            }
        }
        Ok(g.constant(Tensor::from_f64(vec![bs, t, n], &w)?))
    }

    fn linguistic(&self, g: &Graph<T>, p: &Bound, batch: &Batch, mask: &SeqMask<T>) -> Result<Var> {
        let e = g.embedding(p.get("phone.embed")?, &batch.phonemes, &[batch.size(), batch.n_max])?;
        let e = g.masked_fill(e, &mask.rows, T::zero())?;
        conformer::stack(g, p, "phone", self.config.layers, e, self.config.heads, mask)
    }

    /// Continuous encoder output `[B, N, d]`, zero on padded phonemes.
    fn encode_graph(&self, g: &Graph<T>, p: &Bound, batch: &Batch, w: Var, ling: Var, mask: &SeqMask<T>) -> Result<Var> {
        let (bs, t, m) = (batch.size(), batch.t_max, batch.bands);
        let mut x = vec![T::zero(); bs * t * m];
        for (i, (xv, &mv)) in x.iter_mut().zip(&batch.mel).enumerate() {
            if batch.frame_mask[i / m] {
                *xv = T::lit((mv - self.mel_mean[i % m]) / self.mel_scale);
            }
        }
        let x = g.constant(Tensor::new(vec![bs, t, m], x)?);
        let down = g.normalize_rows(g.transpose(w)?);
        let mel_ph = g.bmm(down, x)?;
        let h = g.add(conformer::linear(g, p, "enc.in", mel_ph)?, ling)?;
        let h = g.masked_fill(h, &mask.rows, T::zero())?;
        let h = conformer::stack(g, p, "enc", self.config.layers, h, self.config.heads, mask)?;
        let z = conformer::linear(g, p, "enc.out", h)?;
        let pad: Vec<bool> = batch
            .phone_mask
            .iter()
            .flat_map(|&v| std::iter::repeat_n(!v, self.config.code_dim))
            .collect();
        g.masked_fill(z, &pad, T::zero())
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_graph(
        &self,
        g: &Graph<T>,
        p: &Bound,
        batch: &Batch,
        zq: Var,
        w: Var,
        ling: Var,
        speakers: &[usize],
        pmask: &SeqMask<T>,
    ) -> Result<Var> {
        let h = g.add(conformer::linear(g, p, "dec.in", zq)?, ling)?;
        let spk = g.embedding(p.get("speaker.embed")?, speakers, &[batch.size()])?;
        let h = g.masked_fill(g.add_per_item(h, spk)?, &pmask.rows, T::zero())?;
        let frames = g.bmm(w, h)?;
        let fmask = SeqMask::new(&batch.frame_mask, batch.size(), batch.t_max, self.config.model_dim);
        let frames = conformer::stack(g, p, "dec", self.config.layers, frames, self.config.heads, &fmask)?;
        let out = conformer::linear(g, p, "dec.out", frames)?;
        let mean = g.constant(Tensor::from_f64(vec![self.config.mel_bands], &self.mel_mean)?);
        g.add_bias(g.scale(out, T::lit(self.mel_scale)), mean)
    }

    fn codes_tensor(&self, rvq: &Rvq<T>, batch: &Batch, codes: &[CodeSequence], keep: Option<usize>) -> Result<Tensor<T>> {
        let (n, d) = (batch.n_max, self.config.code_dim);
        if codes.len() != batch.size() {
            return Err(Error::Contract(format!("{} code sequences for {} items", codes.len(), batch.size())));
        }
        let mut data = vec![T::zero(); batch.size() * n * d];
        for (b, c) in codes.iter().enumerate() {
            if c.len() != batch.phone_count(b) {
                return Err(Error::Contract(format!(
                    "item {b}: {} codes for {} phonemes",
                    c.len(),
                    batch.phone_count(b)
                )));
            }
            let v = rvq.lookup(c, keep)?;
            data[b * n * d..b * n * d + v.len()].copy_from_slice(&v);
        }
        Tensor::new(vec![batch.size(), n, d], data)
    }

    /// Full forward pass on a batch.
    pub fn forward(&self, g: &Graph<T>, p: &Bound, batch: &Batch, opts: &ForwardOptions) -> Result<ForwardOutput<T>> {
        self.check_batch(batch)?;
        let speakers = match &opts.speakers {
            Some(s) if s.len() != batch.size() => {
                return Err(Error::Contract(format!("{} speaker overrides for {} items", s.len(), batch.size())));
            }
            Some(s) => {
                if let Some(&bad) = s.iter().find(|&&x| x >= self.config.speakers) {
                    return Err(Error::Contract(format!("speaker id {bad} out of range")));
                }
                s.clone()
            }
            None => batch.speakers.clone(),
        };
        let (bs, n, dim) = (batch.size(), batch.n_max, self.config.model_dim);
        let pmask = SeqMask::new(&batch.phone_mask, bs, n, dim);
        let w = self.resample_weights(g, p, batch)?;
        let ling = self.linguistic(g, p, batch, &pmask)?;

        let mut out = ForwardOutput {
            pred: w,
            commitment: None,
            codes: None,
            level_inputs: Vec::new(),
            latent: Vec::new(),
        };
        let zq = match (&self.rvq, &opts.codes) {
            (Some(rvq), Some(codes)) => g.constant(self.codes_tensor(rvq, batch, codes, opts.keep_levels)?),
            (None, Some(_)) => return Err(Error::Contract("code override on a model without a quantizer".into())),
            (rvq, None) => {
                let z = self.encode_graph(g, p, batch, w, ling, &pmask)?;
                out.latent = g.value(z).data().to_vec();
                match rvq {
                    Some(rvq) if !opts.bypass => {
                        let q = rvq_forward_graph(g, rvq, z, &batch.phone_mask)?;
                        let codes = split_codes(rvq, batch, &q.indices)?;
                        out.commitment = Some(q.commitment);
                        out.level_inputs = q.inputs;
                        let zq = match opts.keep_levels {
                            Some(k) if k < rvq.depth() => g.constant(self.codes_tensor(rvq, batch, &codes, Some(k))?),
                            _ => q.output,
                        };
                        out.codes = Some(codes);
                        zq
                    }
                    _ => z,
                }
            }
        };
        out.pred = self.decode_graph(g, p, batch, zq, w, ling, &speakers, &pmask)?;
        Ok(out)
    }

    /// Linguistic features `[B, N, model_dim]` for a batch (inference).
    pub fn phoneme_encode_batch(&self, batch: &Batch) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let mask = SeqMask::new(&batch.phone_mask, batch.size(), batch.n_max, self.config.model_dim);
        let v = self.linguistic(&g, &p, batch, &mask)?;
        let t = g.value(v).clone();
        Ok(t)
    }

    /// Linguistic features `N × model_dim` for one phoneme sequence.
    pub fn phoneme_encode(&self, phonemes: &[usize]) -> Result<Vec<T>> {
        let durations = vec![1; phonemes.len()];
        let utt = self.placeholder(phonemes, &durations, 0)?;
        Ok(self.phoneme_encode_batch(&make_batch(&[&utt], None)?)?.into_data())
    }

    fn placeholder(&self, phonemes: &[usize], durations: &[usize], speaker: usize) -> Result<Utterance> {
        if phonemes.len() != durations.len() {
            return Err(Error::Contract(format!(
                "{} phonemes but {} durations",
                phonemes.len(),
                durations.len()
            )));
        }
        let frames: usize = durations.iter().sum();
        let m = self.config.mel_bands;
        let utt = Utterance {
            id: "decode".into(),
            speaker_id: speaker,
            phonemes: phonemes.to_vec(),
            durations: durations.to_vec(),
            mel: MelSpectrogram::new(vec![0.0; frames * m], frames, m, &self.features)?,
            transcript: None,
        };
        utt.validate(self.config.vocab_size)?;
        Ok(utt)
    }

    /// Inference forward pass; returns per item predicted mels and codes.
    pub fn run_batch(&self, batch: &Batch, opts: &ForwardOptions) -> Result<(Vec<MelSpectrogram>, Option<Vec<CodeSequence>>)> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let out = self.forward(&g, &p, batch, opts)?;
        let pred = g.value(out.pred);
        if !pred.is_finite() {
            return Err(Error::Numeric(format!("non-finite decoder output for {:?}", batch.ids)));
        }
        let (t, m) = (batch.t_max, batch.bands);
        let mut mels = Vec::with_capacity(batch.size());
        for b in 0..batch.size() {
            let frames = batch.frame_count(b);
            let vals = pred.data()[b * t * m..(b * t + frames) * m].iter().map(|v| v.as_f64()).collect();
            mels.push(MelSpectrogram::new(vals, frames, m, &self.features)?);
        }
        Ok((mels, out.codes))
    }

    /// Continuous encoder output `N × d` for one utterance.
    pub fn encode_continuous(&self, utt: &Utterance) -> Result<Vec<T>> {
        let batch = make_batch(&[utt], None)?;
        self.check_batch(&batch)?;
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let pmask = SeqMask::new(&batch.phone_mask, 1, batch.n_max, self.config.model_dim);
        let w = self.resample_weights(&g, &p, &batch)?;
        let ling = self.linguistic(&g, &p, &batch, &pmask)?;
        let z = self.encode_graph(&g, &p, &batch, w, ling, &pmask)?;
        let v = g.value(z).data().to_vec();
        Ok(v)
    }

    pub fn encode_batch(&self, batch: &Batch) -> Result<Vec<CodeSequence>> {
        let rvq = self.require_rvq()?;
        self.check_batch(batch)?;
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let pmask = SeqMask::new(&batch.phone_mask, batch.size(), batch.n_max, self.config.model_dim);
        let w = self.resample_weights(&g, &p, batch)?;
        let ling = self.linguistic(&g, &p, batch, &pmask)?;
        let z = self.encode_graph(&g, &p, batch, w, ling, &pmask)?;
        let q = rvq_forward_graph(&g, rvq, z, &batch.phone_mask)?;
        split_codes(rvq, batch, &q.indices)
    }

    pub fn encode_utterance(&self, utt: &Utterance) -> Result<CodeSequence> {
        let mut v = self.encode_batch(&make_batch(&[utt], None)?)?;
        Ok(v.remove(0))
    }

    pub fn decode_codes(
        &self,
        codes: &CodeSequence,
        phonemes: &[usize],
        durations: &[usize],
        speaker: usize,
    ) -> Result<MelSpectrogram> {
        if codes.len() != phonemes.len() {
            return Err(Error::Contract(format!(
                "{} codes for {} phonemes",
                codes.len(),
                phonemes.len()
            )));
        }
        let utt = self.placeholder(phonemes, durations, speaker)?;
        let batch = make_batch(&[&utt], None)?;
        let opts = ForwardOptions {
            codes: Some(vec![codes.clone()]),
            ..Default::default()
        };
        Ok(self.run_batch(&batch, &opts)?.0.remove(0))
    }

    pub fn reconstruct(&self, utt: &Utterance, opts: &ReconstructOptions) -> Result<MelSpectrogram> {
        let batch = make_batch(&[utt], None)?;
        let fopts = ForwardOptions {
            speakers: opts.speaker.map(|s| vec![s]),
            codes: opts.codes.clone().map(|c| vec![c]),
            bypass: opts.bypass,
            keep_levels: opts.keep_levels,
        };
        Ok(self.run_batch(&batch, &fopts)?.0.remove(0))
    }

    fn require_rvq(&self) -> Result<&Rvq<T>> {
        self.rvq
            .as_ref()
            .ok_or_else(|| Error::Contract("model was built without a quantizer".into()))
    }

    /// Checkpoint container whose header `codec` section holds `model`,
    /// `features`, `vocab`, `speakers`, `quantizer`, with arrays `param.*`, `rvq.*`, `norm.*`.
    pub fn to_container(&self) -> Result<Container> {
        let header = ModelHeader {
            model: self.config.clone(),
            features: self.features.clone(),
            vocab: self.vocab.clone(),
            speakers: self.speakers.clone(),
            quantizer: self.rvq.as_ref().map(|q| QuantizerMeta {
                beta: q.beta.as_f64(),
                decay: q.levels[0].decay.as_f64(),
                epsilon: q.levels[0].epsilon.as_f64(),
            }),
        };
        let mut c = Container {
            header: serde_json::json!({ "codec": header }),
            ..Default::default()
        };
        for (name, t) in self.params.iter() {
            c.insert_tensor(format!("param.{name}"), t);
        }
        if let Some(q) = &self.rvq {
            for (l, book) in q.levels.iter().enumerate() {
                c.insert_tensor(format!("rvq.{l}.entries"), &book.entries);
                c.insert_tensor(
                    format!("rvq.{l}.count"),
                    &Tensor::new(vec![book.size()], book.ema_count.clone())?,
                );
                c.insert_tensor(format!("rvq.{l}.sum"), &book.ema_sum);
            }
        }
        c.insert_tensor("norm.mean", &Tensor::<f64>::new(vec![self.mel_mean.len()], self.mel_mean.clone())?);
        c.insert_tensor("norm.scale", &Tensor::<f64>::scalar(self.mel_scale));
        Ok(c)
    }

    /// Rebuilds a model from [`to_container`](Self::to_container) output.
    /// Arrays outside the `param.`, `rvq.` and `norm.` namespaces are ignored.
    pub fn from_container(c: &Container) -> Result<Self> {
        let codec = c
            .header
            .get("codec")
            .ok_or_else(|| Error::Checkpoint("header has no `codec` section".into()))?;
        let header: ModelHeader = serde_json::from_value(codec.clone())
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let mut model = Self::new(header.model, header.features, header.vocab, header.speakers, 0)?;
        let expected: Vec<String> = model.params.names().cloned().collect();
        for name in &expected {
            let t: Tensor<T> = c.tensor(&format!("param.{name}"))?;
            let slot = model.params.get_mut(name).expect("listed above");
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        let stray = c
            .arrays
            .keys()
            .filter_map(|k| k.strip_prefix("param."))
            .find(|k| !expected.iter().any(|e| e == k));
        if let Some(k) = stray {
            return Err(Error::Checkpoint(format!("unexpected parameter `{k}`")));
        }
        match (&mut model.rvq, header.quantizer) {
            (Some(q), Some(meta)) => {
                q.beta = T::lit(meta.beta);
                for (l, book) in q.levels.iter_mut().enumerate() {
                    let entries: Tensor<T> = c.tensor(&format!("rvq.{l}.entries"))?;
                    let count: Tensor<T> = c.tensor(&format!("rvq.{l}.count"))?;
                    let sum: Tensor<T> = c.tensor(&format!("rvq.{l}.sum"))?;
                    if entries.shape() != book.entries.shape()
                        || sum.shape() != book.ema_sum.shape()
                        || count.len() != book.size()
                    {
                        return Err(Error::Checkpoint(format!("codebook {l} shape disagrees with config")));
                    }
                    book.entries = entries;
                    book.ema_count = count.into_data();
                    book.ema_sum = sum;
                    book.decay = T::lit(meta.decay);
                    book.epsilon = T::lit(meta.epsilon);
                }
            }
            (None, None) => {}
            _ => return Err(Error::Checkpoint("quantizer metadata disagrees with config".into())),
        }
        let mean: Tensor<f64> = c.tensor("norm.mean")?;
        if mean.len() != model.config.mel_bands {
            return Err(Error::Checkpoint("norm.mean length disagrees with mel_bands".into()));
        }
        model.mel_mean = mean.into_data();
        model.mel_scale = c.tensor::<f64>("norm.scale")?.data()[0];
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Splits `[level][B·N]` indices into per-item code sequences.
fn split_codes<T: Scalar>(rvq: &Rvq<T>, batch: &Batch, indices: &[Vec<usize>]) -> Result<Vec<CodeSequence>> {
    (0..batch.size())
        .map(|b| {
            let n = batch.phone_count(b);
            let idx = indices
                .iter()
                .map(|lv| lv[b * batch.n_max..b * batch.n_max + n].to_vec())
                .collect();
            CodeSequence::from_indices(idx, rvq)
        })
        .collect()
}
