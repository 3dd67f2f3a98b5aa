use std::fmt::Write as _;
use std::path::Path;

use prosody_core::analysis::{
    conditional_pmfs, embed_2d, level_dependency, measure_probe, most_frequent_code, pca_codes, phoneme_code_pairs,
    pmf_csv, probes_csv, scatter_svg, select_path_codes, spearman, speaker_code_pairs, speaker_relative_report,
    symmetric_kl_matrix, synth_probe, ConditionalPmf, PathCandidate, PcaProjection, ProbeMeasurement,
};
use prosody_core::corpus::Utterance;
use prosody_core::model::CodecModel;
use prosody_core::quantizer::{usage_stats, CodeSequence};
use prosody_core::signal::{write_wav, WavFormat};
use prosody_core::{Error, Scalar};
use serde::Serialize;

use crate::context::{io_err, Context};
use crate::train::encode_all;
use crate::{AnalyzeTarget, CliResult};

struct Session<'a, T> {
    ctx: &'a Context,
    model: CodecModel<T>,
    utts: Vec<Utterance>,
    codes: Vec<CodeSequence>,
}

impl<T: Scalar> Session<'_, T> {
    fn k(&self) -> usize {
        self.model.config.codes
    }

    fn speaker_pmfs(&self, level: usize) -> CliResult<Vec<ConditionalPmf>> {
        let pairs: Vec<(String, usize)> = speaker_code_pairs(&self.utts, &self.codes, level)?
            .into_iter()
            .map(|(s, c)| (self.model.speakers[s].clone(), c))
            .collect();
        Ok(conditional_pmfs(&pairs, self.k(), self.ctx.cfg.analysis.alpha)?)
    }

    fn phoneme_pmfs(&self, level: usize) -> CliResult<Vec<ConditionalPmf>> {
        let vocab = &self.model.vocab;
        let pairs: Vec<(String, usize)> = phoneme_code_pairs(&self.utts, &self.codes, level)?
            .into_iter()
            .map(|(p, c)| (vocab.symbol(p).unwrap_or("?").to_string(), c))
            .collect();
        Ok(conditional_pmfs(&pairs, self.k(), self.ctx.cfg.analysis.alpha)?)
    }
}

#[derive(Serialize)]
struct LevelUsageRow {
    level: usize,
    usage: f64,
    used_codes: usize,
}

#[derive(Serialize)]
struct LevelEntropy {
    level: usize,
    speaker_mean_entropy: f64,
    speaker_ratio: f64,
    phoneme_mean_entropy: f64,
}

/// Level-1 PCA with the selected path codes.
#[derive(Serialize)]
pub struct PathReport {
    pub projection: PcaProjection,
    pub axis: usize,
    pub half_width: f64,
    pub path: Vec<usize>,
    /// On-axis coordinate of each path code.
    pub path_coords: Vec<f64>,
}

#[derive(Serialize)]
struct SpeakerCurve {
    speaker: String,
    codes: Vec<usize>,
    f0: Vec<Option<f64>>,
    /// Rank correlation of F0 with the on-axis coordinate over voiced probes.
    spearman: Option<f64>,
    /// `spearman` with the axis oriented so the first speaker's F0 rises.
    oriented_spearman: Option<f64>,
}

fn mean_entropy(pmfs: &[ConditionalPmf]) -> f64 {
    pmfs.iter().map(ConditionalPmf::entropy).sum::<f64>() / pmfs.len().max(1) as f64
}

pub fn analyze<T: Scalar>(ctx: &Context, target: AnalyzeTarget, out: Option<&Path>) -> CliResult<()> {
    let model = ctx.load_model::<T>(None)?;
    if model.rvq.is_none() {
        return Err(Error::Contract("latent analysis needs a quantized model".into()).into());
    }
    let utts = ctx.analysis_set(&model)?;
    let codes = encode_all(&model, &utts, ctx.cfg.train.batch_size)?;
    let s = Session {
        ctx,
        model,
        utts,
        codes,
    };
    let dir = ctx.out_dir(out, "analysis");
    match target {
        AnalyzeTarget::Usage => usage(&s, &dir),
        AnalyzeTarget::Entropy => entropy(&s, &dir),
        AnalyzeTarget::Klmap => klmap(&s, &dir),
        AnalyzeTarget::Pca => {
            let r = path_report(&s)?;
            write_pca(&s, &r, &dir)
        }
        AnalyzeTarget::Probes => probes(&s, &dir),
        AnalyzeTarget::SpeakerRelative => speaker_relative(&s, &dir),
    }
}

fn usage<T: Scalar>(s: &Session<T>, dir: &Path) -> CliResult<()> {
    let stats = usage_stats(&s.codes, s.k());
    let rows: Vec<LevelUsageRow> = stats
        .iter()
        .enumerate()
        .map(|(l, u)| LevelUsageRow {
            level: l + 1,
            usage: u.usage,
            used_codes: u.histogram.iter().filter(|&&c| c > 0).count(),
        })
        .collect();
    let mut csv = String::from("level,usage,used_codes\n");
    let mut hist = String::from("level,code,count\n");
    for (r, u) in rows.iter().zip(&stats) {
        let _ = writeln!(csv, "{},{:.6},{}", r.level, r.usage, r.used_codes);
        for (c, n) in u.histogram.iter().enumerate() {
            let _ = writeln!(hist, "{},{c},{n}", r.level);
        }
    }
    s.ctx.write(&dir.join("usage.csv"), csv)?;
    s.ctx.write(&dir.join("usage_histogram.csv"), hist)?;
    s.ctx.write_json(
        &dir.join("usage.json"),
        &serde_json::json!({ "codes": s.k(), "utterances": s.utts.len(), "levels": rows }),
    )?;
    for r in &rows {
        println!("level {}: usage {:.3} ({} codes)", r.level, r.usage, r.used_codes);
    }
    Ok(())
}

fn entropy<T: Scalar>(s: &Session<T>, dir: &Path) -> CliResult<()> {
    let max = (s.k() as f64).ln();
    let mut levels = Vec::new();
    for l in 0..s.model.config.levels {
        let sp = s.speaker_pmfs(l)?;
        let ph = s.phoneme_pmfs(l)?;
        s.ctx.write(&dir.join(format!("entropy_speaker_level{}.csv", l + 1)), pmf_csv(&sp))?;
        s.ctx.write(&dir.join(format!("entropy_phoneme_level{}.csv", l + 1)), pmf_csv(&ph))?;
        let e = mean_entropy(&sp);
        levels.push(LevelEntropy {
            level: l + 1,
            speaker_mean_entropy: e,
            speaker_ratio: e / max,
            phoneme_mean_entropy: mean_entropy(&ph),
        });
        println!("level {}: mean H(code|speaker) {:.4} nats ({:.3} of ln K)", l + 1, e, e / max);
    }
    let dependency = if s.model.config.levels >= 2 {
        Some(level_dependency(&s.codes, s.k(), s.ctx.cfg.analysis.alpha)?)
    } else {
        None
    };
    s.ctx.write_json(
        &dir.join("entropy.json"),
        &serde_json::json!({
            "codes": s.k(),
            "alpha": s.ctx.cfg.analysis.alpha,
            "max_entropy": max,
            "levels": levels,
            "level_dependency": dependency,
        }),
    )
}

fn klmap<T: Scalar>(s: &Session<T>, dir: &Path) -> CliResult<()> {
    let pmfs = s.phoneme_pmfs(0)?;
    let d = symmetric_kl_matrix(&pmfs)?;
    let pts = embed_2d(&d, &s.ctx.cfg.analysis.embedding)?;
    let labels: Vec<String> = pmfs.iter().map(|p| p.label.clone()).collect();
    let mut matrix = format!("label,{}\n", labels.join(","));
    for (i, l) in labels.iter().enumerate() {
        let row: Vec<String> = (0..labels.len()).map(|j| format!("{:.6}", d[(i, j)])).collect();
        let _ = writeln!(matrix, "{l},{}", row.join(","));
    }
    let mut coords = String::from("label,x,y\n");
    for (l, p) in labels.iter().zip(&pts) {
        let _ = writeln!(coords, "{l},{:.6},{:.6}", p[0], p[1]);
    }
    s.ctx.write(&dir.join("kl_matrix.csv"), matrix)?;
    s.ctx.write(&dir.join("klmap.csv"), coords)?;
    s.ctx.write(
        &dir.join("klmap.svg"),
        scatter_svg(&pts, &labels, None, "Symmetric KL between phoneme-conditional level-1 code distributions"),
    )
}

/// Level-1 PCA over the analysis codes and the corridor path along the
/// configured axis.
fn path_report<T: Scalar>(s: &Session<T>) -> CliResult<PathReport> {
    let rvq = s.model.rvq.as_ref().expect("checked quantized");
    let book = &rvq.levels[0];
    let proj = pca_codes(&s.codes, book)?;
    let a = &s.ctx.cfg.analysis;
    let off = if a.axis == 1 { 1 } else { 0 };
    let half_width = a.corridor * proj.variances[off].sqrt();
    let used = usage_stats(&s.codes, s.k());
    let candidates: Vec<PathCandidate> = used[0]
        .histogram
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(c, _)| PathCandidate {
            code: c,
            coords: code_coords(&proj, book.entry(c)),
        })
        .collect();
    let path = select_path_codes(&candidates, a.axis, a.n_points, half_width)?;
    let path_coords = path
        .iter()
        .map(|&c| code_coords(&proj, book.entry(c))[a.axis - 1])
        .collect();
    Ok(PathReport {
        projection: proj,
        axis: a.axis,
        half_width,
        path,
        path_coords,
    })
}

fn code_coords<T: Scalar>(proj: &PcaProjection, v: &[T]) -> Vec<f64> {
    let v: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
    proj.project(&v).into_iter().take(2).collect()
}

fn write_pca<T: Scalar>(s: &Session<T>, r: &PathReport, dir: &Path) -> CliResult<()> {
    let book = &s.model.rvq.as_ref().expect("checked quantized").levels[0];
    let counts = &usage_stats(&s.codes, s.k())[0].histogram;
    let mut csv = String::from("code,count,pc1,pc2,on_path\n");
    let (mut pts, mut labels, mut groups) = (Vec::new(), Vec::new(), Vec::new());
    for (c, &n) in counts.iter().enumerate().filter(|(_, &n)| n > 0) {
        let xy = code_coords(&r.projection, book.entry(c));
        let on = r.path.contains(&c);
        let _ = writeln!(csv, "{c},{n},{:.6},{:.6},{on}", xy[0], xy[1]);
        pts.push([xy[0], xy[1]]);
        labels.push(c.to_string());
        groups.push(usize::from(on));
    }
    s.ctx.write(&dir.join("pca_codes.csv"), csv)?;
    s.ctx.write_json(&dir.join("pca.json"), r)?;
    s.ctx.write(
        &dir.join("pca.svg"),
        scatter_svg(&pts, &labels, Some(&groups), "Level-1 codes on the first two principal axes"),
    )?;
    println!(
        "explained variance {:?}; path {:?}",
        &r.projection.explained_ratio[..2.min(r.projection.explained_ratio.len())],
        r.path
    );
    Ok(())
}

/// Codes for levels 2 and up: configured for level 2, else the most frequent.
fn fill_codes<T: Scalar>(s: &Session<T>) -> CliResult<Vec<usize>> {
    (1..s.model.config.levels)
        .map(|l| {
            let configured = if l == 1 { s.ctx.cfg.analysis.level2_code } else { None };
            if let Some(c) = configured {
                if c >= s.k() {
                    return Err(Error::Contract(format!("analysis.level2_code {c} exceeds {} codes", s.k())).into());
                }
                return Ok(c);
            }
            most_frequent_code(&s.codes, l, s.k())
                .ok_or_else(|| Error::Analysis(format!("level {} has no codes", l + 1)).into())
        })
        .collect()
}

fn reference<'s, T: Scalar>(s: &'s Session<T>) -> CliResult<&'s Utterance> {
    match &s.ctx.cfg.analysis.reference {
        Some(id) => s
            .utts
            .iter()
            .find(|u| &u.id == id)
            .ok_or_else(|| Error::Contract(format!("analysis.reference `{id}` is not in the analysis set")).into()),
        None => Ok(&s.utts[0]),
    }
}

fn probes<T: Scalar>(s: &Session<T>, dir: &Path) -> CliResult<()> {
    let r = path_report(s)?;
    let fill = fill_codes(s)?;
    let reference = reference(s)?;
    let cfg = &s.ctx.cfg.analysis.probe;
    let book = &s.model.rvq.as_ref().expect("checked quantized").levels[0];
    let wav_dir = dir.join("probes");
    std::fs::create_dir_all(&wav_dir).map_err(|e| io_err(&wav_dir, e))?;
    let mut rows: Vec<ProbeMeasurement> = Vec::new();
    for &c in &r.path {
        let mut codes = vec![c];
        codes.extend_from_slice(&fill);
        let probe = synth_probe(&s.model, reference, &codes, reference.speaker_id, cfg)?;
        write_wav(wav_dir.join(format!("probe_{c}.wav")), &probe.audio, WavFormat::Pcm16)?;
        let v: Vec<f64> = book.entry(c).iter().map(|x| x.as_f64()).collect();
        rows.push(measure_probe(&probe.audio, c, &v, &r.projection, reference.speaker_id, cfg)?);
    }
    s.ctx.write(&dir.join("probes.csv"), probes_csv(&rows))?;
    s.ctx.write_json(
        &dir.join("probes.json"),
        &serde_json::json!({ "reference": reference.id, "fill": fill, "path": r.path, "probes": rows }),
    )
}

fn speaker_relative<T: Scalar>(s: &Session<T>, dir: &Path) -> CliResult<()> {
    let r = path_report(s)?;
    let fill = fill_codes(s)?;
    let reference = reference(s)?;
    let speakers: Vec<usize> = (0..s.model.speakers.len()).collect();
    let cfg = &s.ctx.cfg.analysis.probe;
    let grid = speaker_relative_report(&s.model, &r.path, &fill, reference, &speakers, &r.projection, cfg)?;
    let rho = |row: &[ProbeMeasurement]| -> Option<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = row
            .iter()
            .zip(&r.path_coords)
            .filter_map(|(m, &x)| m.f0.map(|f| (x, f)))
            .unzip();
        if x.len() < 2 {
            return None;
        }
        spearman(&x, &y).ok().filter(|v| v.is_finite())
    };
    let orientation = grid.first().and_then(|row| rho(row)).map(|v| if v < 0.0 { -1.0 } else { 1.0 }).unwrap_or(1.0);
    let curves: Vec<SpeakerCurve> = grid
        .iter()
        .zip(&speakers)
        .map(|(row, &sp)| {
            let sr = rho(row);
            SpeakerCurve {
                speaker: s.model.speakers[sp].clone(),
                codes: r.path.clone(),
                f0: row.iter().map(|m| m.f0).collect(),
                spearman: sr,
                oriented_spearman: sr.map(|v| v * orientation),
            }
        })
        .collect();
    let flat: Vec<ProbeMeasurement> = grid.into_iter().flatten().collect();
    s.ctx.write(&dir.join("speaker_relative.csv"), probes_csv(&flat))?;
    s.ctx.write_json(
        &dir.join("speaker_relative.json"),
        &serde_json::json!({
            "reference": reference.id,
            "fill": fill,
            "axis": r.axis,
            "path_coords": r.path_coords,
            "speakers": curves,
        }),
    )?;
    for c in &curves {
        println!("{}: F0 {:?} spearman {:?}", c.speaker, c.f0, c.oriented_spearman);
    }
    Ok(())
}
