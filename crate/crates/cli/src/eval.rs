use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use prosody_core::analysis::{probe_pitch, ProbeConfig};
use prosody_core::corpus::Utterance;
use prosody_core::metrics::{cosine_similarity, f0_errors, mcd, pearson_f0, psnr_mel, wer_cer, MetricReport};
use prosody_core::model::{CodecModel, ReconstructOptions};
use prosody_core::signal::{invert_mel, MelSpectrogram};
use prosody_core::trainer::{evaluate, EvalOptions};
use prosody_core::{Error, Scalar};
use serde::{Deserialize, Serialize};

use crate::context::{io_err, Context};
use crate::{CliError, CliResult, MetricTask, UtteranceSet};

#[derive(Debug, Clone)]
pub struct MetricArgs {
    pub task: MetricTask,
    pub set: UtteranceSet,
    pub checkpoint: Option<PathBuf>,
    pub hyp_transcripts: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingPair {
    id: String,
    reference: Vec<f64>,
    hypothesis: Vec<f64>,
}

/// Writes `<base>.csv` (one row per key plus the column means) and
/// `<base>.json`.
pub fn write_metric_table(ctx: &Context, base: &Path, key: &str, rows: &[(String, MetricReport)]) -> CliResult<()> {
    let mut csv = format!("{key},{}\n", MetricReport::csv_header());
    for (k, r) in rows {
        let _ = writeln!(csv, "{k},{}", r.csv_row());
    }
    ctx.write(&base.with_extension("csv"), csv)?;
    let json: BTreeMap<&str, &MetricReport> = rows.iter().map(|(k, r)| (k.as_str(), r)).collect();
    ctx.write_json(&base.with_extension("json"), &json)
}

fn with_mean(mut rows: Vec<(String, MetricReport)>) -> Vec<(String, MetricReport)> {
    let reports: Vec<MetricReport> = rows.iter().map(|r| r.1.clone()).collect();
    rows.push(("mean".into(), MetricReport::mean(&reports)));
    rows
}

fn reconstruct_all<T: Scalar>(model: &CodecModel<T>, utts: &[Utterance]) -> CliResult<Vec<MelSpectrogram>> {
    utts.iter()
        .map(|u| Ok(model.reconstruct(u, &ReconstructOptions::default())?))
        .collect()
}

/// MCD plus VDE/GPE/FFE and F0 correlation per utterance. Both sides are
/// inverted to audio with the same Griffin-Lim settings so the pitch tracker
/// sees matching artefacts.
pub fn table8_reports<T: Scalar>(model: &CodecModel<T>, utts: &[Utterance], probe: &ProbeConfig) -> CliResult<Vec<MetricReport>> {
    let hyps = reconstruct_all(model, utts)?;
    utts.iter()
        .zip(&hyps)
        .map(|(u, hyp)| {
            let f0 = |m: &MelSpectrogram| -> CliResult<_> {
                let audio = invert_mel(m, probe.griffin_lim_iters)?;
                Ok(probe_pitch(&audio, probe)?)
            };
            let (fr, fh) = (f0(&u.mel)?, f0(hyp)?);
            let e = f0_errors(&fr, &fh)?;
            Ok(MetricReport {
                mcd: Some(mcd(&u.mel, hyp)?),
                vde: Some(e.vde),
                gpe: Some(e.gpe),
                ffe: Some(e.ffe),
                pearson_f0: pearson_f0(&fr, &fh).ok().filter(|v| v.is_finite()),
                ..Default::default()
            })
        })
        .collect()
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<D> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        CliError::Core(Error::Contract(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))
    })
}

pub fn metrics<T: Scalar>(ctx: &Context, args: &MetricArgs) -> CliResult<()> {
    let dir = ctx.out_dir(args.out.as_deref(), "metrics");
    let model = ctx.load_model::<T>(args.checkpoint.as_deref())?;
    let utts = ctx.model_set(&model, args.set)?;
    let ids = || utts.iter().map(|u| u.id.clone());
    match args.task {
        MetricTask::Reconstruction => {
            let hyps = reconstruct_all(&model, &utts)?;
            let rows = utts
                .iter()
                .zip(&hyps)
                .map(|(u, h)| {
                    Ok((
                        u.id.clone(),
                        MetricReport {
                            psnr: Some(psnr_mel(&u.mel, h)?),
                            mcd: Some(mcd(&u.mel, h)?),
                            ..Default::default()
                        },
                    ))
                })
                .collect::<CliResult<Vec<_>>>()?;
            write_metric_table(ctx, &dir.join("reconstruction"), "id", &with_mean(rows))
        }
        MetricTask::Levels => {
            let depth = model
                .rvq
                .as_ref()
                .map(|q| q.depth())
                .ok_or_else(|| Error::Contract("level ablation needs a quantized model".into()))?;
            let rows = (1..=depth)
                .map(|k| {
                    let r = evaluate(
                        &model,
                        &utts,
                        &EvalOptions {
                            keep_levels: Some(k),
                            bypass: false,
                            batch_size: ctx.cfg.train.batch_size,
                        },
                    )?;
                    Ok((
                        k.to_string(),
                        MetricReport {
                            psnr: Some(r.mean_psnr),
                            ..Default::default()
                        },
                    ))
                })
                .collect::<CliResult<Vec<_>>>()?;
            write_metric_table(ctx, &dir.join("levels"), "levels", &rows)
        }
        MetricTask::Table8 => {
            let rows = ids().zip(table8_reports(&model, &utts, &ctx.cfg.analysis.probe)?).collect();
            write_metric_table(ctx, &dir.join("table8"), "id", &with_mean(rows))
        }
        MetricTask::Intelligibility => {
            let path = args
                .hyp_transcripts
                .as_deref()
                .ok_or_else(|| CliError::Usage("--task intelligibility needs --hyp-transcripts".into()))?;
            let hyp: BTreeMap<String, String> = read_json(path)?;
            let mut rows = Vec::new();
            for u in &utts {
                let Some(reference) = &u.transcript else { continue };
                let h = hyp
                    .get(&u.id)
                    .ok_or_else(|| Error::Contract(format!("no hypothesis transcript for `{}`", u.id)))?;
                let (wer, cer) = wer_cer(reference, h)?;
                rows.push((
                    u.id.clone(),
                    MetricReport {
                        wer: Some(wer),
                        cer: Some(cer),
                        ..Default::default()
                    },
                ));
            }
            if rows.is_empty() {
                return Err(Error::Contract("no utterance in the set has a reference transcript".into()).into());
            }
            write_metric_table(ctx, &dir.join("intelligibility"), "id", &with_mean(rows))
        }
        MetricTask::Similarity => {
            let path = args
                .embeddings
                .as_deref()
                .ok_or_else(|| CliError::Usage("--task similarity needs --embeddings".into()))?;
            let pairs: Vec<EmbeddingPair> = read_json(path)?;
            if pairs.is_empty() {
                return Err(Error::Contract(format!("{} holds no embedding pairs", path.display())).into());
            }
            #[derive(Serialize)]
            struct Row<'a> {
                id: &'a str,
                cosine: f64,
            }
            let mut csv = String::from("id,cosine\n");
            let mut rows = Vec::with_capacity(pairs.len());
            for p in &pairs {
                let c = cosine_similarity(&p.reference, &p.hypothesis)?;
                let _ = writeln!(csv, "{},{c:.6}", p.id);
                rows.push(Row { id: &p.id, cosine: c });
            }
            let mean = rows.iter().map(|r| r.cosine).sum::<f64>() / rows.len() as f64;
            let _ = writeln!(csv, "mean,{mean:.6}");
            ctx.write(&dir.join("similarity.csv"), csv)?;
            ctx.write_json(&dir.join("similarity.json"), &serde_json::json!({ "pairs": rows, "mean": mean }))
        }
    }
}
