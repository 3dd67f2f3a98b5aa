use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use prosody_core::corpus::{make_batch, Utterance};
use prosody_core::metrics::MetricReport;
use prosody_core::model::{CodecModel, Quantization};
use prosody_core::quantizer::{usage_stats, CodeSequence};
use prosody_core::trainer::{load_checkpoint, run_training, LoopIo, TrainConfig, TrainOutcome, TrainState};
use prosody_core::{Error, Scalar};
use serde::Serialize;

use crate::context::{io_err, Context};
use crate::eval::{table8_reports, write_metric_table};
use crate::{CliResult, UtteranceSet};

#[derive(Serialize)]
struct EvalSummary {
    step: u64,
    mean_l1: f64,
    mean_psnr: f64,
}

/// Run summary; deliberately free of wall-clock timings so reruns match.
#[derive(Serialize)]
pub struct TrainSummary {
    pub step: u64,
    pub steps_run: u64,
    pub skipped: u64,
    pub stopped_early: bool,
    pub reference_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Per level fraction of codes used on the training set.
    pub usage: Vec<f64>,
    evals: Vec<EvalSummary>,
}

pub fn train_config(ctx: &Context, seed: Option<u64>, max_steps: Option<u64>) -> TrainConfig {
    let mut tc = ctx.cfg.train.clone();
    if let Some(s) = seed {
        tc.seed = s;
    }
    if let Some(m) = max_steps {
        tc.max_steps = m;
    }
    tc
}

/// Per level code usage of `model` over `utts`.
pub fn corpus_usage<T: Scalar>(model: &CodecModel<T>, utts: &[Utterance], batch_size: usize) -> CliResult<Vec<f64>> {
    if model.rvq.is_none() {
        return Ok(Vec::new());
    }
    let codes = encode_all(model, utts, batch_size)?;
    Ok(usage_stats(&codes, model.config.codes).iter().map(|u| u.usage).collect())
}

pub fn encode_all<T: Scalar>(model: &CodecModel<T>, utts: &[Utterance], batch_size: usize) -> CliResult<Vec<CodeSequence>> {
    let mut out = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(batch_size.max(1)) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        out.extend(model.encode_batch(&make_batch(&refs, None)?)?);
    }
    Ok(out)
}

fn open_log(path: &Path, append: bool) -> CliResult<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    Ok(BufWriter::new(f))
}

fn run<T: Scalar>(
    state: &mut TrainState<T>,
    train: &[Utterance],
    eval: &[Utterance],
    checkpoint: &Path,
    log_path: &Path,
    append: bool,
) -> CliResult<TrainOutcome> {
    if let Some(dir) = checkpoint.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut log = open_log(log_path, append)?;
    let outcome = run_training(
        state,
        train,
        LoopIo {
            log: Some(&mut log),
            checkpoint: Some(checkpoint),
            eval_set: (!eval.is_empty()).then_some(eval),
            step_limit: None,
        },
    )?;
    log.flush().map_err(|e| io_err(log_path, e))?;
    Ok(outcome)
}

fn summarize<T: Scalar>(state: &TrainState<T>, outcome: &TrainOutcome, train: &[Utterance]) -> CliResult<TrainSummary> {
    Ok(TrainSummary {
        step: state.step,
        steps_run: outcome.steps_run,
        skipped: outcome.skipped,
        stopped_early: outcome.stopped_early,
        reference_loss: outcome.reference_loss,
        final_loss: outcome.final_loss,
        usage: corpus_usage(&state.model, train, state.config.batch_size)?,
        evals: outcome
            .evals
            .iter()
            .map(|(step, r)| EvalSummary {
                step: *step,
                mean_l1: r.mean_l1,
                mean_psnr: r.mean_psnr,
            })
            .collect(),
    })
}

/// Fresh state for `config` on the training manifest; returns it with the
/// training and held-out utterances.
fn fresh_state<T: Scalar>(
    ctx: &Context,
    model_cfg: prosody_core::model::ModelConfig,
    tc: TrainConfig,
) -> CliResult<(TrainState<T>, Vec<Utterance>, Vec<Utterance>)> {
    let corpus = ctx.load_training_corpus()?;
    let model = CodecModel::<T>::new(model_cfg, ctx.cfg.features.clone(), corpus.vocab, corpus.speakers, tc.seed)?;
    let train = ctx.select(corpus.utterances.clone(), UtteranceSet::Train);
    let eval = if ctx.extraction_stride() == 1 {
        Vec::new()
    } else {
        ctx.select(corpus.utterances, UtteranceSet::Extraction)
    };
    let state = TrainState::new(model, tc, &train)?;
    Ok((state, train, eval))
}

pub fn train<T: Scalar>(ctx: &Context, seed: Option<u64>, resume: bool, max_steps: Option<u64>) -> CliResult<()> {
    let checkpoint = ctx.cfg.paths.checkpoint.clone();
    let log_path = ctx.reports().join("train_log.jsonl");
    let (mut state, train, eval) = if resume {
        let mut state = load_checkpoint::<T>(&checkpoint)?;
        if let Some(m) = max_steps {
            state.config.max_steps = m;
        }
        let train = ctx.model_set(&state.model, UtteranceSet::Train)?;
        let eval = if ctx.extraction_stride() == 1 {
            Vec::new()
        } else {
            ctx.model_set(&state.model, UtteranceSet::Extraction)?
        };
        (state, train, eval)
    } else {
        fresh_state::<T>(ctx, ctx.cfg.model.clone(), train_config(ctx, seed, max_steps))?
    };
    let outcome = run(&mut state, &train, &eval, &checkpoint, &log_path, resume)?;
    let summary = summarize(&state, &outcome, &train)?;
    ctx.write_json(&ctx.reports().join("train.json"), &summary)?;
    println!(
        "trained to step {} ({} run, {} skipped); loss {:?} (step-{} reference {:?})",
        summary.step, summary.steps_run, summary.skipped, summary.final_loss, state.config.reference_step, summary.reference_loss
    );
    Ok(())
}

pub fn continuous_checkpoint(discrete: &Path) -> PathBuf {
    discrete.with_extension("continuous.ckpt")
}

pub fn ablate_continuous<T: Scalar>(ctx: &Context, seed: Option<u64>, max_steps: Option<u64>) -> CliResult<()> {
    let discrete_path = &ctx.cfg.paths.checkpoint;
    if !discrete_path.is_file() {
        return Err(Error::Contract(format!(
            "ablate-continuous compares against the trained codec at {}; run `train` first",
            discrete_path.display()
        ))
        .into());
    }
    let discrete = ctx.load_model::<T>(None)?;
    if !discrete.is_quantized() {
        return Err(Error::Contract(format!("{} holds an unquantized model", discrete_path.display())).into());
    }
    let mut model_cfg = discrete.config.clone();
    model_cfg.quantization = Quantization::None;
    let tc = train_config(ctx, seed, max_steps);
    let (mut state, train, eval) = fresh_state::<T>(ctx, model_cfg, tc)?;
    let dir = ctx.reports().join("ablation");
    let ckpt = continuous_checkpoint(discrete_path);
    let outcome = run(&mut state, &train, &eval, &ckpt, &dir.join("train_log_continuous.jsonl"), false)?;
    ctx.write_json(&dir.join("train_continuous.json"), &summarize(&state, &outcome, &train)?)?;

    let utts = ctx.model_set(&discrete, UtteranceSet::Extraction)?;
    let probe = &ctx.cfg.analysis.probe;
    let rows: Vec<(String, MetricReport)> = vec![
        ("discrete".into(), MetricReport::mean(&table8_reports(&discrete, &utts, probe)?)),
        ("continuous".into(), MetricReport::mean(&table8_reports(&state.model, &utts, probe)?)),
    ];
    write_metric_table(ctx, &dir.join("table8"), "variant", &rows)?;
    for (name, r) in &rows {
        println!(
            "{name}: MCD {:.3} VDE {:.3} GPE {:.3} FFE {:.3}",
            r.mcd.unwrap_or(f64::NAN),
            r.vde.unwrap_or(f64::NAN),
            r.gpe.unwrap_or(f64::NAN),
            r.ffe.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
