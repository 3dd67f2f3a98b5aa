//! Loss assembly, the optimization loop, evaluation and resumable training
//! checkpoints.

#[cfg(test)]
mod tests;

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, clip_global_norm, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::checkpoint::Container;
use crate::corpus::{make_batch, Batch, Utterance};
use crate::error::{Error, Result};
use crate::metrics::psnr_mel;
use crate::model::{CodecModel, ForwardOptions, ForwardOutput};
use crate::quantizer::{ema_update, reinit_dead_codes, CodeSequence};
use crate::scalar::Scalar;

/// Steps averaged into the smoothed loss used for early stopping.
pub const LOSS_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Linear warmup length; 0 disables warmup.
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Commitment weight β.
    pub beta: f64,
    /// Codebook EMA decay λ.
    pub ema_decay: f64,
    pub ema_epsilon: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub clip_norm: f64,
    /// Codes whose EMA count drops below this are re-seeded from the batch.
    pub dead_code_threshold: f64,
    /// Dead-code check cadence in steps; 0 disables re-seeding.
    pub reinit_every: u64,
    /// Stop once the smoothed loss falls below this fraction of its value at
    /// `reference_step`.
    pub early_stop_ratio: Option<f64>,
    pub reference_step: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 1000,
            batch_size: 8,
            max_steps: 20_000,
            beta: 0.25,
            ema_decay: 0.99,
            ema_epsilon: 1e-5,
            seed: 0,
            eval_every: 500,
            checkpoint_every: 1000,
            clip_norm: 1.0,
            dead_code_threshold: 0.03,
            reinit_every: 50,
            early_stop_ratio: None,
            reference_step: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Contract(format!("train.{field}: {why}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps", "must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be a finite non-negative number");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay", "must lie in (0, 1)");
        }
        if !(self.ema_epsilon > 0.0) {
            return bad("ema_epsilon", "must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", "must be positive");
        }
        if !(self.dead_code_threshold >= 0.0) {
            return bad("dead_code_threshold", "must be non-negative");
        }
        if let Some(r) = self.early_stop_ratio {
            if !(r > 0.0 && r < 1.0) {
                return bad("early_stop_ratio", "must lie in (0, 1)");
            }
        }
        if self.reference_step == 0 {
            return bad("reference_step", "must be positive");
        }
        Ok(())
    }

    /// Learning rate for the update that completes step `step + 1`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Mean absolute error over unmasked mel cells.
    pub l1: f64,
    /// Mean squared error over unmasked mel cells.
    pub l2: f64,
    /// Unweighted commitment; 0 without a quantizer.
    pub commitment: f64,
}

impl LossParts {
    pub fn total(&self, beta: f64) -> f64 {
        self.l1 + self.l2 + beta * self.commitment
    }
}

/// Loss nodes in a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l1: Var,
    pub l2: Var,
    pub commitment: Option<Var>,
}

/// Assembles `l1 + l2 + β·commitment` for a forward output.
pub fn loss_graph<T: Scalar>(g: &Graph<T>, batch: &Batch, out: &ForwardOutput<T>, beta: f64) -> Result<LossVars> {
    let (bs, t, m) = (batch.size(), batch.t_max, batch.bands);
    let pad: Vec<bool> = batch.frame_mask.iter().flat_map(|&v| std::iter::repeat_n(!v, m)).collect();
    let cells = batch.frame_mask.iter().filter(|&&v| v).count() * m;
    if cells == 0 {
        return Err(Error::Contract("loss over a batch without frames".into()));
    }
    let target: Vec<f64> = batch
        .mel
        .iter()
        .zip(&pad)
        .map(|(&v, &p)| if p { 0.0 } else { v })
        .collect();
    let target = g.constant(Tensor::from_f64(vec![bs, t, m], &target)?);
    let diff = g.masked_fill(g.sub(out.pred, target)?, &pad, T::zero())?;
    let inv = T::lit(1.0 / cells as f64);
    let l1 = g.scale(g.sum(g.abs(diff)), inv);
    let l2 = g.scale(g.sum(g.square(diff)), inv);
    let mut total = g.add(l1, l2)?;
    if let Some(c) = out.commitment {
        total = g.add(total, g.scale(c, T::lit(beta)))?;
    }
    Ok(LossVars {
        total,
        l1,
        l2,
        commitment: out.commitment,
    })
}

fn read_parts<T: Scalar>(g: &Graph<T>, lv: &LossVars) -> (f64, LossParts) {
    let s = |v: Var| g.value(v).data()[0].as_f64();
    (
        s(lv.total),
        LossParts {
            l1: s(lv.l1),
            l2: s(lv.l2),
            commitment: lv.commitment.map(s).unwrap_or(0.0),
        },
    )
}

fn non_finite(batch: &Batch, what: &str) -> Error {
    Error::Numeric(format!("non-finite {what} for utterances {:?}", batch.ids))
}

/// Total and parts of the training loss at the current parameters. No state
/// changes.
pub fn compute_loss<T: Scalar>(model: &CodecModel<T>, batch: &Batch, beta: f64) -> Result<(f64, LossParts)> {
    let g = Graph::new();
    let p = model.params.bind_frozen(&g);
    let out = model.forward(&g, &p, batch, &ForwardOptions::default())?;
    let lv = loss_graph(&g, batch, &out, beta)?;
    let (total, parts) = read_parts(&g, &lv);
    if !total.is_finite() {
        return Err(non_finite(batch, "loss"));
    }
    Ok((total, parts))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l1: f64,
    pub l2: f64,
    pub commit: f64,
    pub usage_l1: Option<f64>,
    pub usage_l2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl StepRecord {
    pub fn total(&self, beta: f64) -> f64 {
        self.l1 + self.l2 + beta * self.commit
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub model: CodecModel<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    /// Lowest mean eval L1 seen so far.
    pub best_eval: Option<f64>,
    pub rng: ChaCha8Rng,
    pub codebooks_initialized: bool,
    /// Totals of the most recent non-skipped steps.
    pub recent_losses: VecDeque<f64>,
    /// Smoothed loss at `reference_step`.
    pub reference_loss: Option<f64>,
}

impl<T: Scalar> TrainState<T> {
    /// Fits the model's mel normalization on `train` and applies the
    /// quantizer settings from `config`.
    pub fn new(mut model: CodecModel<T>, config: TrainConfig, train: &[Utterance]) -> Result<Self> {
        config.validate()?;
        model.fit_normalization(train)?;
        if let Some(rvq) = &mut model.rvq {
            rvq.beta = T::lit(config.beta);
            for book in &mut rvq.levels {
                book.decay = T::lit(config.ema_decay);
                book.epsilon = T::lit(config.ema_epsilon);
            }
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            model,
            adam: AdamState::new(),
            step: 0,
            best_eval: None,
            rng,
            codebooks_initialized: false,
            recent_losses: VecDeque::new(),
            reference_loss: None,
        })
    }

    /// Mean of the recent loss window.
    pub fn smoothed_loss(&self) -> Option<f64> {
        if self.recent_losses.is_empty() {
            None
        } else {
            Some(self.recent_losses.iter().sum::<f64>() / self.recent_losses.len() as f64)
        }
    }

    /// Draws a batch of distinct utterances.
    pub fn sample_batch(&mut self, utts: &[Utterance]) -> Result<Batch> {
        if utts.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let k = self.config.batch_size.min(utts.len());
        let idx = rand::seq::index::sample(&mut self.rng, utts.len(), k);
        let items: Vec<&Utterance> = idx.iter().map(|i| &utts[i]).collect();
        make_batch(&items, None)
    }

    /// Seeds every codebook level by k-means++ on the batch latents.
    fn init_codebooks(&mut self, batch: &Batch) -> Result<()> {
        let g = Graph::new();
        let p = self.model.params.bind_frozen(&g);
        let opts = ForwardOptions {
            bypass: true,
            ..Default::default()
        };
        let out = self.model.forward(&g, &p, batch, &opts)?;
        let d = self.model.config.code_dim;
        let rows = valid_rows(&out.latent, &batch.phone_mask, d);
        if let Some(rvq) = &mut self.model.rvq {
            rvq.init_from_data(&rows, &mut self.rng)?;
        }
        self.codebooks_initialized = true;
        Ok(())
    }

    /// Forward, backward, clipped Adam update, EMA codebook update and
    /// periodic dead-code re-seeding. A numeric failure skips the update but
    /// still advances the step counter.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        if self.model.is_quantized() && !self.codebooks_initialized {
            self.init_codebooks(batch)?;
        }
        let step = self.step;
        self.step += 1;
        match self.try_step(batch, step) {
            Ok(rec) => {
                self.recent_losses.push_back(rec.total(self.config.beta));
                if self.recent_losses.len() > LOSS_WINDOW {
                    self.recent_losses.pop_front();
                }
                if self.step == self.config.reference_step {
                    self.reference_loss = self.smoothed_loss();
                }
                Ok(rec)
            }
            Err(e) if e.is_numeric() => Ok(StepRecord {
                step: self.step,
                l1: f64::NAN,
                l2: f64::NAN,
                commit: f64::NAN,
                usage_l1: None,
                usage_l2: None,
                skipped: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        }
    }

    fn try_step(&mut self, batch: &Batch, step: u64) -> Result<StepRecord> {
        let g = Graph::new();
        let p = self.model.params.bind(&g);
        let out = self.model.forward(&g, &p, batch, &ForwardOptions::default())?;
        let lv = loss_graph(&g, batch, &out, self.config.beta)?;
        let (total, parts) = read_parts(&g, &lv);
        if !total.is_finite() {
            return Err(non_finite(batch, "loss"));
        }
        let grads = g.backward(lv.total)?;
        let mut grads = p.gradients(&g, &grads);
        let norm = clip_global_norm(&mut grads, self.config.clip_norm);
        if !norm.is_finite() {
            return Err(non_finite(batch, "gradient"));
        }
        let cfg = AdamConfig {
            lr: self.config.lr_at(step),
            ..AdamConfig::default()
        };
        adam_step(&mut self.model.params, &grads, &mut self.adam, &cfg)?;

        let mut usage = Vec::new();
        if let (Some(rvq), Some(codes)) = (&mut self.model.rvq, &out.codes) {
            let d = rvq.dim();
            let reinit = self.config.reinit_every > 0 && (step + 1) % self.config.reinit_every == 0;
            for (l, book) in rvq.levels.iter_mut().enumerate() {
                let inputs = valid_rows(&out.level_inputs[l], &batch.phone_mask, d);
                let assigned: Vec<usize> = codes.iter().flat_map(|c| c.level(l).iter().copied()).collect();
                ema_update(book, &assigned, &inputs)?;
                if reinit {
                    reinit_dead_codes(book, &inputs, self.config.dead_code_threshold, &mut self.rng)?;
                }
                usage.push(batch_usage(codes, l, book.size()));
            }
        }
        Ok(StepRecord {
            step: step + 1,
            l1: parts.l1,
            l2: parts.l2,
            commit: parts.commitment,
            usage_l1: usage.first().copied(),
            usage_l2: usage.get(1).copied(),
            skipped: None,
        })
    }

    /// Training checkpoint: the model container plus optimizer moments and a
    /// `train` header section.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = self.model.to_container()?;
        for (name, t) in &self.adam.m {
            c.insert_tensor(format!("adam.m.{name}"), t);
        }
        for (name, t) in &self.adam.v {
            c.insert_tensor(format!("adam.v.{name}"), t);
        }
        let header = TrainHeader {
            config: self.config.clone(),
            step: self.step,
            adam_step: self.adam.step,
            best_eval: self.best_eval,
            rng: RngState::capture(&self.rng),
            codebooks_initialized: self.codebooks_initialized,
            recent_losses: self.recent_losses.iter().copied().collect(),
            reference_loss: self.reference_loss,
        };
        if let serde_json::Value::Object(map) = &mut c.header {
            map.insert("train".into(), serde_json::to_value(header)?);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let model = CodecModel::from_container(c)?;
        let section = c
            .header
            .get("train")
            .ok_or_else(|| Error::Checkpoint("not a training checkpoint: header has no `train` section".into()))?;
        let h: TrainHeader = serde_json::from_value(section.clone())
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let mut adam = AdamState::new();
        adam.step = h.adam_step;
        for name in model.params.names() {
            let m = format!("adam.m.{name}");
            if c.arrays.contains_key(&m) {
                adam.m.insert(name.clone(), c.tensor(&m)?);
                adam.v.insert(name.clone(), c.tensor(&format!("adam.v.{name}"))?);
            }
        }
        Ok(Self {
            config: h.config,
            model,
            adam,
            step: h.step,
            best_eval: h.best_eval,
            rng: h.rng.restore()?,
            codebooks_initialized: h.codebooks_initialized,
            recent_losses: h.recent_losses.into(),
            reference_loss: h.reference_loss,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: impl AsRef<Path>) -> Result<()> {
    state.to_container()?.save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<TrainState<T>> {
    TrainState::from_container(&Container::load(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainHeader {
    config: TrainConfig,
    step: u64,
    adam_step: u64,
    best_eval: Option<f64>,
    rng: RngState,
    codebooks_initialized: bool,
    recent_losses: Vec<f64>,
    reference_loss: Option<f64>,
}

/// ChaCha8 position; the 128-bit word position is kept as a decimal string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint(format!("rng seed has {} bytes, expected 32", self.seed.len())))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

fn valid_rows<T: Scalar>(rows: &[T], valid: &[bool], d: usize) -> Vec<T> {
    rows.chunks(d)
        .zip(valid)
        .filter(|(_, &v)| v)
        .flat_map(|(r, _)| r.iter().copied())
        .collect()
}

fn batch_usage(codes: &[CodeSequence], level: usize, k: usize) -> f64 {
    let mut seen = vec![false; k];
    for c in codes {
        for &i in c.level(level) {
            seen[i] = true;
        }
    }
    seen.iter().filter(|&&s| s).count() as f64 / k as f64
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    /// Decode from the first `k` levels only.
    pub keep_levels: Option<usize>,
    /// Feed the continuous latent to the decoder.
    pub bypass: bool,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub l1: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub mean_l1: f64,
    pub mean_psnr: f64,
    pub per_utterance: Vec<UtteranceScore>,
}

/// Reconstruction L1 and PSNR over `utts`. Read-only: codebooks are not
/// updated.
pub fn evaluate<T: Scalar>(model: &CodecModel<T>, utts: &[Utterance], opts: &EvalOptions) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let fopts = ForwardOptions {
        bypass: opts.bypass,
        keep_levels: opts.keep_levels,
        ..Default::default()
    };
    let mut per = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(opts.batch_size.max(1)) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let (mels, _) = model.run_batch(&make_batch(&refs, None)?, &fopts)?;
        for (u, pred) in chunk.iter().zip(&mels) {
            let l1 = u.mel.values().iter().zip(pred.values()).map(|(a, b)| (a - b).abs()).sum::<f64>()
                / u.mel.values().len() as f64;
            per.push(UtteranceScore {
                id: u.id.clone(),
                l1,
                psnr: psnr_mel(&u.mel, pred)?,
            });
        }
    }
    let n = per.len() as f64;
    Ok(EvalReport {
        utterances: per.len(),
        mean_l1: per.iter().map(|s| s.l1).sum::<f64>() / n,
        mean_psnr: per.iter().map(|s| s.psnr).sum::<f64>() / n,
        per_utterance: per,
    })
}

/// Side channels of [`run_training`].
#[derive(Default)]
pub struct LoopIo<'a> {
    /// JSON-lines step log.
    pub log: Option<&'a mut dyn Write>,
    /// Written every `checkpoint_every` steps and at the end.
    pub checkpoint: Option<&'a Path>,
    pub eval_set: Option<&'a [Utterance]>,
    /// Stop after this many steps in this call, regardless of `max_steps`.
    pub step_limit: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub skipped: u64,
    pub stopped_early: bool,
    pub reference_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub evals: Vec<(u64, EvalReport)>,
}

/// Trains until `max_steps`, the early-stop criterion or `step_limit`.
pub fn run_training<T: Scalar>(state: &mut TrainState<T>, train: &[Utterance], mut io: LoopIo<'_>) -> Result<TrainOutcome> {
    let mut outcome = TrainOutcome {
        steps_run: 0,
        skipped: 0,
        stopped_early: false,
        reference_loss: state.reference_loss,
        final_loss: None,
        evals: Vec::new(),
    };
    while state.step < state.config.max_steps && io.step_limit.is_none_or(|n| outcome.steps_run < n) {
        let batch = state.sample_batch(train)?;
        let rec = state.train_step(&batch)?;
        outcome.steps_run += 1;
        if rec.skipped.is_some() {
            outcome.skipped += 1;
        }
        if let Some(w) = io.log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io("training log", e))?;
        }
        if let (Some(eval), true) = (io.eval_set, state.step % state.config.eval_every == 0) {
            let opts = EvalOptions {
                batch_size: state.config.batch_size,
                ..Default::default()
            };
            let r = evaluate(&state.model, eval, &opts)?;
            if state.best_eval.is_none_or(|b| r.mean_l1 < b) {
                state.best_eval = Some(r.mean_l1);
            }
            outcome.evals.push((state.step, r));
        }
        if let (Some(path), true) = (io.checkpoint, state.step % state.config.checkpoint_every == 0) {
            save_checkpoint(state, path)?;
        }
        if let (Some(ratio), Some(reference), Some(now)) =
            (state.config.early_stop_ratio, state.reference_loss, state.smoothed_loss())
        {
            if state.step > state.config.reference_step && now < ratio * reference {
                outcome.stopped_early = true;
                break;
            }
        }
    }
    if let Some(path) = io.checkpoint {
        save_checkpoint(state, path)?;
    }
    outcome.reference_loss = state.reference_loss;
    outcome.final_loss = state.smoothed_loss();
    Ok(outcome)
}
